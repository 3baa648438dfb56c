//! Pulling JSON objects out of free-form model completions.

use alloc::string::String;

use serde_json::{Map, Value};

/// First balanced `{...}` block in `text`, ignoring braces inside string
/// literals. Unbalanced openings are skipped.
pub fn first_balanced_object(text: &str) -> Option<&str> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = text[start..].find('{') {
        let open = start + offset;
        if let Some(close) = matching_close(bytes, open) {
            return Some(&text[open..=close]);
        }
        start = open + 1;
    }
    None
}

fn matching_close(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == q {
                quote = None;
            }
            continue;
        }
        match b {
            b'"' | b'\'' => quote = Some(b),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses the first balanced object as JSON, falling back to reading
/// Python-style single-quoted dictionaries.
pub fn extract_object(text: &str) -> Option<Map<String, Value>> {
    let block = first_balanced_object(text)?;
    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(block) {
        return Some(map);
    }
    let converted = requote_single_quotes(block);
    match serde_json::from_str::<Value>(&converted) {
        Ok(Value::Object(map)) => Some(map),
        _ => None,
    }
}

/// Rewrites `'text'` literals as JSON strings, leaving double-quoted ones alone.
fn requote_single_quotes(block: &str) -> String {
    let mut out = String::with_capacity(block.len());
    let mut chars = block.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '"' => {
                out.push('"');
                let mut escaped = false;
                for c in chars.by_ref() {
                    out.push(c);
                    if escaped {
                        escaped = false;
                    } else if c == '\\' {
                        escaped = true;
                    } else if c == '"' {
                        break;
                    }
                }
            }
            '\'' => {
                out.push('"');
                let mut escaped = false;
                for c in chars.by_ref() {
                    if escaped {
                        if c != '\'' {
                            out.push('\\');
                        }
                        out.push(c);
                        escaped = false;
                    } else if c == '\\' {
                        escaped = true;
                    } else if c == '\'' {
                        break;
                    } else if c == '"' {
                        out.push_str("\\\"");
                    } else {
                        out.push(c);
                    }
                }
                out.push('"');
            }
            _ => out.push(ch),
        }
    }
    out
}
