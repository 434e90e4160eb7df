//! Tolerant parsers for model completions. Errors are plain strings; the
//! gateway turns them into a repair prompt or a stage-tagged error.

use std::collections::BTreeMap;

use serde_json::Value;

use super::prompt::fields;

/// Returns the first balanced `{...}` region, skipping braces inside JSON
/// string literals.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if start.is_none() {
            if b == b'{' {
                start = Some(i);
                depth = 1;
            }
            continue;
        }
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start.unwrap()..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Finds and parses the first JSON object in `text`. A completion that is
/// itself a JSON string literal wrapping an object is unwrapped first.
pub fn find_json_object(text: &str) -> Result<serde_json::Map<String, Value>, String> {
    let trimmed = text.trim().trim_end_matches(',');
    if trimmed.starts_with('"') {
        if let Ok(Value::String(inner)) = serde_json::from_str::<Value>(trimmed) {
            if let Ok(obj) = find_json_object(&inner) {
                return Ok(obj);
            }
        }
    }
    let region = extract_json_object(text).ok_or("no JSON object found")?;
    match serde_json::from_str::<Value>(region) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => Err("JSON value is not an object".into()),
        Err(e) => Err(format!("invalid JSON object: {e}")),
    }
}

/// `{"value": [{"related": "..."}]}` → the ordered `related` strings.
pub fn parse_json_value_list(text: &str) -> Result<Vec<String>, String> {
    let obj = find_json_object(text)?;
    let items = obj
        .get("value")
        .and_then(Value::as_array)
        .ok_or("expected a `value` array")?;
    items
        .iter()
        .map(|item| {
            item.get("related")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| format!("item without a string `related` field: {item}"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationScores {
    pub scores: BTreeMap<char, f64>,
    /// Set when any value had to be clamped into `[0, 100]`.
    pub clamped: bool,
}

/// Letter-keyed 0..100 scores; accepts both `"(A)"` and `"A"` keys.
pub fn parse_relation_scores(text: &str) -> Result<RelationScores, String> {
    let obj = find_json_object(text)?;
    let mut scores = BTreeMap::new();
    let mut clamped = false;
    for (key, value) in &obj {
        let letter = normalize_letter(key).ok_or_else(|| format!("`{key}` is not an option letter"))?;
        let raw = match value {
            Value::Number(n) => n.as_f64(),
            Value::String(s) => s.trim().parse::<f64>().ok(),
            _ => None,
        }
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("non-numeric score for `{key}`: {value}"))?;
        let v = raw.clamp(0.0, 100.0);
        clamped |= v != raw;
        if scores.insert(letter, v).is_some() {
            return Err(format!("duplicate score for option {letter}"));
        }
    }
    Ok(RelationScores { scores, clamped })
}

fn normalize_letter(key: &str) -> Option<char> {
    let inner = key.trim().trim_start_matches('(').trim_end_matches(')').trim();
    let mut chars = inner.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_alphabetic() => Some(c.to_ascii_uppercase()),
        _ => None,
    }
}

/// `Rating: N` (last occurrence wins) or a bare trailing integer, in 0..=5.
pub fn parse_rating(text: &str) -> Result<u8, String> {
    let lower = text.to_ascii_lowercase();
    let found = match lower.rfind("rating:") {
        Some(pos) => leading_int(&text[pos + "rating:".len()..]),
        None => text
            .split(|c: char| c.is_whitespace())
            .rev()
            .find(|t| !t.is_empty())
            .and_then(|t| leading_int(t.trim_end_matches(['.', '*']))),
    };
    let n = found.ok_or("no rating found")?;
    if (0..=5).contains(&n) {
        Ok(n as u8)
    } else {
        Err(format!("rating {n} outside 0..=5"))
    }
}

fn leading_int(s: &str) -> Option<i64> {
    let s = s.trim_start().trim_start_matches('*').trim_start();
    let end = s
        .char_indices()
        .find(|&(i, c)| !(c.is_ascii_digit() || (i == 0 && c == '-')))
        .map_or(s.len(), |(i, _)| i);
    s[..end].parse().ok()
}

/// Splits the refiner completion into its reasoning and the key list after
/// `Refined String List:`. List items may be bracketed, quoted or bare, and
/// a trailing unclosed quote is tolerated.
pub fn parse_refined_list(text: &str) -> Result<(String, Vec<String>), String> {
    let label = format!("{}:", fields::REFINED_LIST);
    let pos = text
        .to_ascii_lowercase()
        .rfind(&label.to_ascii_lowercase())
        .ok_or_else(|| format!("missing `{label}`"))?;
    let reasoning = text[..pos].trim().trim_start_matches('"').trim().to_string();
    let list = text[pos + label.len()..].trim();
    let list = list.lines().take_while(|l| !l.trim().is_empty()).collect::<Vec<_>>().join(" ");
    Ok((reasoning, split_list_items(&list)))
}

/// Splits a list literal on commas that sit outside parentheses.
pub fn split_list_items(list: &str) -> Vec<String> {
    let mut items = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for c in list.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth <= 0 => {
                items.push(std::mem::take(&mut current));
                continue;
            }
            _ => {}
        }
        current.push(c);
    }
    items.push(current);
    items
        .into_iter()
        .map(|s| {
            s.trim()
                .trim_matches(|c: char| matches!(c, '[' | ']' | '\'' | '"' | '`') || c.is_whitespace())
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// `(A)x, (B)y, (C)No Match` → `[('A', "x"), ('B', "y"), ('C', "No Match")]`.
pub fn parse_mcq_options(text: &str) -> Result<Vec<(char, String)>, String> {
    let text = text.trim().trim_matches('"');
    let mut marks = Vec::new();
    let bytes = text.as_bytes();
    let mut expected = b'A';
    let mut i = 0;
    while i + 2 < bytes.len() {
        if bytes[i] == b'(' && bytes[i + 1] == expected && bytes[i + 2] == b')' {
            marks.push((i, expected as char));
            expected += 1;
            i += 3;
        } else {
            i += 1;
        }
    }
    if marks.is_empty() {
        return Err("no (A) option found".into());
    }
    let mut options = Vec::with_capacity(marks.len());
    for (n, &(pos, letter)) in marks.iter().enumerate() {
        let end = marks.get(n + 1).map_or(text.len(), |&(p, _)| p);
        let body = text[pos + 3..end]
            .trim()
            .trim_end_matches(',')
            .trim()
            .trim_matches(|c: char| matches!(c, '\'' | '"'))
            .to_string();
        options.push((letter, body));
    }
    Ok(options)
}
