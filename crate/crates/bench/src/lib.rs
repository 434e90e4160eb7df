//! Synthetic inputs shared by the benchmarks.

use matchforge::embed::HashEmbedder;
use matchforge::schema::{Attribute, Table};
use matchforge::{Embedder, Schema, TokenEmbeddings, VectorIndex};

/// A target schema with `tables` tables of `per_table` attributes each.
pub fn synthetic_target(tables: usize, per_table: usize) -> Schema {
    Schema {
        name: "bench".into(),
        tables: (0..tables)
            .map(|t| Table {
                name: format!("table_{t}"),
                description: format!("synthetic table {t} holding clinical events"),
                attributes: (0..per_table)
                    .map(|a| Attribute {
                        name: format!("field_{t}_{a}"),
                        description: format!("value {a} recorded for event kind {t}, in units"),
                        data_type: if a % 2 == 0 { "integer" } else { "varchar" }.into(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub fn hash_index(target: &Schema, dim: usize) -> (HashEmbedder, VectorIndex) {
    let embedder = HashEmbedder::new(0, dim);
    let index = VectorIndex::build(target, &embedder, 1).expect("synthetic schema indexes");
    (embedder, index)
}

pub fn embed(embedder: &dyn Embedder, text: &str) -> TokenEmbeddings {
    embedder.embed(text).expect("hash embedder is infallible")
}
