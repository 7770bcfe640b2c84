use serde_json::Value;

/// Pulls one JSON value out of a model reply.
///
/// A ```` ```json ```` (or bare ```` ``` ````) fence wins when present; prose
/// around it is ignored. Without a fence, the first `{` or `[` that starts a
/// complete JSON value is used.
pub fn extract_json(text: &str) -> Result<Value, String> {
    if let Some(body) = fenced_block(text) {
        return serde_json::from_str(body.trim()).map_err(|e| format!("fenced block is not valid JSON: {e}"));
    }
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Ok(v);
    }
    for (i, c) in text.char_indices() {
        if c == '{' || c == '[' {
            let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
            if let Some(Ok(v)) = stream.next() {
                return Ok(v);
            }
        }
    }
    Err("no JSON value found in reply".into())
}

fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n').map(|n| n + 1)?;
    let lang = after[..body_start].trim();
    if !(lang.is_empty() || lang.eq_ignore_ascii_case("json")) {
        return None;
    }
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(&body[..end])
}

/// Reads a list of strings from a JSON array, or failing that from one item
/// per line / semicolon. Bullets and numbering are stripped.
pub fn extract_string_list(text: &str) -> Result<Vec<String>, String> {
    if let Ok(Value::Array(items)) = extract_json(text) {
        return items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(format!("list item {other} is not a string")),
            })
            .collect();
    }
    let trimmed = text.trim();
    if trimmed.starts_with('[') || trimmed.starts_with('{') || trimmed.contains("```") {
        return Err("reply looks like JSON but is not a string array".into());
    }
    let items: Vec<String> = trimmed
        .split(['\n', ';'])
        .map(|line| {
            line.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim_start_matches(|c: char| c.is_ascii_digit())
                .trim_start_matches(['.', ')'])
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect();
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fenced_json_with_prose() {
        let text = "Here you go:\n```json\n{\"a\": 1}\n```\nThanks";
        assert_eq!(extract_json(text).unwrap(), json!({"a": 1}));
    }

    #[test]
    fn bare_json_embedded_in_prose() {
        assert_eq!(extract_json("Answer: [1, 2] done").unwrap(), json!([1, 2]));
        assert_eq!(extract_json("{\"x\": [1]}").unwrap(), json!({"x": [1]}));
        assert!(extract_json("no json here").is_err());
        assert!(extract_json("```json\n{broken\n```").is_err());
    }

    #[test]
    fn string_lists() {
        assert_eq!(extract_string_list("[\"a\", \"b c\"]").unwrap(), vec!["a", "b c"]);
        assert_eq!(extract_string_list("aspirin; acetylsalicylic acid").unwrap(), vec!["aspirin", "acetylsalicylic acid"]);
        assert_eq!(extract_string_list("1. alpha\n- beta\n").unwrap(), vec!["alpha", "beta"]);
        assert!(extract_string_list("").unwrap().is_empty());
        assert!(extract_string_list("[1, 2]").is_err());
    }
}
