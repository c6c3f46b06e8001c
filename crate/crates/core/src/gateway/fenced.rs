/// Returns the body of the first fenced code block in `text` whose info
/// string is empty or `json`.
pub fn extract_fenced_json(text: &str) -> Option<&str> {
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let line_end = after.find('\n')?;
        let info = after[..line_end].trim();
        let body_start = &after[line_end + 1..];
        let close = body_start.find("```")?;
        if info.is_empty() || info.eq_ignore_ascii_case("json") {
            return Some(body_start[..close].trim());
        }
        rest = &body_start[close + 3..];
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_json_block() {
        assert_eq!(extract_fenced_json("sure:\n```json\n{\"a\":1}\n```\nbye"), Some("{\"a\":1}"));
        assert_eq!(extract_fenced_json("```\n[1]\n```"), Some("[1]"));
        assert_eq!(extract_fenced_json("```python\nx=1\n```\n```json\n{}\n```"), Some("{}"));
        assert_eq!(extract_fenced_json("{\"a\":1}"), None);
        assert_eq!(extract_fenced_json("```json\n{\"a\":1}"), None);
    }
}
