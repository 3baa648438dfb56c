//! Key-path construction and splitting.

use alloc::string::String;
use alloc::vec::Vec;

/// One component of a key-path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment<'a> {
    Key(String),
    Index(usize),
    /// `[*]`, only meaningful in rule patterns.
    AnyIndex,
    Raw(&'a str),
}

pub struct KeyPath;

impl KeyPath {
    pub fn escape_key(key: &str) -> String {
        let mut out = String::with_capacity(key.len());
        for ch in key.chars() {
            match ch {
                '~' => out.push_str("~0"),
                '/' => out.push_str("~1"),
                c => out.push(c),
            }
        }
        out
    }

    pub fn unescape_key(segment: &str) -> String {
        let mut out = String::with_capacity(segment.len());
        let mut chars = segment.chars();
        while let Some(ch) = chars.next() {
            if ch == '~' {
                match chars.next() {
                    Some('0') => out.push('~'),
                    Some('1') => out.push('/'),
                    Some(other) => {
                        out.push('~');
                        out.push(other);
                    }
                    None => out.push('~'),
                }
            } else {
                out.push(ch);
            }
        }
        out
    }

    pub fn child_key(parent: &str, key: &str) -> String {
        Self::join(parent, &Self::escape_key(key))
    }

    pub fn child_index(parent: &str, index: usize) -> String {
        Self::join(parent, &alloc::format!("[{index}]"))
    }

    /// Joins an already-escaped segment (or several) onto `parent`.
    pub fn join(parent: &str, segment: &str) -> String {
        if parent.is_empty() {
            String::from(segment)
        } else if segment.is_empty() {
            String::from(parent)
        } else {
            let mut out = String::with_capacity(parent.len() + 1 + segment.len());
            out.push_str(parent);
            out.push('/');
            out.push_str(segment);
            out
        }
    }

    pub fn segments(path: &str) -> Vec<Segment<'_>> {
        if path.is_empty() {
            return Vec::new();
        }
        path.split('/').map(Self::classify).collect()
    }

    pub fn classify(raw: &str) -> Segment<'_> {
        if raw == "[*]" {
            return Segment::AnyIndex;
        }
        if let Some(inner) = raw.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if let Ok(i) = inner.parse::<usize>() {
                return Segment::Index(i);
            }
        }
        if raw.contains('~') {
            Segment::Key(Self::unescape_key(raw))
        } else {
            Segment::Raw(raw)
        }
    }

    /// Final segment, unescaped; `None` for index segments.
    pub fn last_key(path: &str) -> Option<String> {
        let last = path.rsplit('/').next()?;
        match Self::classify(last) {
            Segment::Key(k) => Some(k),
            Segment::Raw(r) => Some(String::from(r)),
            _ => None,
        }
    }

    pub fn parent(path: &str) -> Option<&str> {
        path.rfind('/')
            .map(|i| &path[..i])
            .or(if path.is_empty() { None } else { Some("") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escaping_round_trips() {
        let key = "kubernetes.io/ingress~class";
        let esc = KeyPath::escape_key(key);
        assert_eq!(esc, "kubernetes.io~1ingress~0class");
        assert_eq!(KeyPath::unescape_key(&esc), key);
    }

    #[test]
    fn parent_and_last_key() {
        assert_eq!(
            KeyPath::parent("spec/containers/[0]"),
            Some("spec/containers")
        );
        assert_eq!(KeyPath::parent("spec"), Some(""));
        assert_eq!(KeyPath::parent(""), None);
        assert_eq!(KeyPath::last_key("spec/containers/[0]"), None);
        assert_eq!(
            KeyPath::last_key("metadata/annotations/a~1b").as_deref(),
            Some("a/b")
        );
    }
}
