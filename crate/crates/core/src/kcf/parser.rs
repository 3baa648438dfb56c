//! Block/flow YAML reader that records the source line of every key.
//!
//! Covers what Kubernetes manifests use in practice: block mappings and
//! sequences (including compact `- key: value` items), flow collections that
//! may span lines (so JSON manifests parse too), plain/quoted/block scalars,
//! comments, anchors and tags (skipped), and `---` / `...` document markers.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::path::KeyPath;
use super::{Diagnostic, Node, NodeValue, Scalar, ScalarKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ParseFailure {
    pub line: u32,
    pub column: u32,
    pub message: String,
}

pub(crate) struct DocOutcome {
    pub first_line: u32,
    pub last_line: u32,
    pub result: Result<BTreeMap<String, Node>, ParseFailure>,
}

pub(crate) struct StreamOutcome {
    pub documents: Vec<DocOutcome>,
    pub diagnostics: Vec<Diagnostic>,
}

type PResult<T> = Result<T, ParseFailure>;

pub(crate) fn parse_stream(lines: &[&str]) -> StreamOutcome {
    let mut diagnostics = Vec::new();
    let mut ranges = Vec::new();
    let mut start = 0usize;
    for (i, line) in lines.iter().enumerate() {
        if let Some(rest) = line.strip_prefix("---") {
            if rest.is_empty() || rest.starts_with(' ') || rest.starts_with('\t') {
                let trailing = rest.trim();
                if !trailing.is_empty() && !trailing.starts_with('#') {
                    diagnostics.push(Diagnostic::at(
                        i as u32 + 1,
                        "content after `---` on the marker line is ignored",
                    ));
                }
                ranges.push((start, i));
                start = i + 1;
                continue;
            }
        }
        if line.trim_end() == "..." {
            ranges.push((start, i));
            start = i + 1;
            continue;
        }
        if line.starts_with('%') && !has_content(&lines[start..i]) {
            start = i + 1;
        }
    }
    ranges.push((start, lines.len()));

    let mut documents = Vec::new();
    for (start, end) in ranges {
        if !has_content(&lines[start..end]) {
            continue;
        }
        let first = (start..end)
            .find(|&i| is_content_line(lines[i]))
            .unwrap_or(start);
        let last = (start..end)
            .rev()
            .find(|&i| is_content_line(lines[i]))
            .unwrap_or(first);
        let mut parser = Parser::new(lines, start, end);
        let result = parser.parse_document();
        diagnostics.append(&mut parser.diags);
        documents.push(DocOutcome {
            first_line: first as u32 + 1,
            last_line: last as u32 + 1,
            result: result.map(|_| parser.nodes),
        });
    }
    StreamOutcome {
        documents,
        diagnostics,
    }
}

fn is_content_line(line: &str) -> bool {
    let t = line.trim_start();
    !t.is_empty() && !t.starts_with('#')
}

fn has_content(lines: &[&str]) -> bool {
    lines.iter().any(|l| is_content_line(l))
}

fn leading_spaces(line: &str) -> usize {
    line.len() - line.trim_start_matches(' ').len()
}

pub(crate) fn is_seq_item(content: &str) -> bool {
    content == "-" || content.starts_with("- ") || content.starts_with("-\t")
}

/// Splits `key: rest` and returns the decoded key plus the byte offset just
/// past the `:`.
pub(crate) fn find_mapping_key(content: &str) -> Option<(String, usize)> {
    let bytes = content.as_bytes();
    let first = *bytes.first()?;
    if first == b'"' || first == b'\'' {
        let (key, end) = read_single_line_quoted(content)?;
        let after = &content[end..];
        let skipped = after.len() - after.trim_start_matches([' ', '\t']).len();
        let colon = end + skipped;
        if bytes.get(colon) == Some(&b':')
            && matches!(bytes.get(colon + 1), None | Some(b' ') | Some(b'\t'))
        {
            return Some((key, colon + 1));
        }
        return None;
    }
    if matches!(
        first,
        b'[' | b'{' | b'#' | b'|' | b'>' | b'*' | b'!' | b'&' | b'?' | b'%' | b'@' | b'`'
    ) || is_seq_item(content)
    {
        return None;
    }
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && i > 0 && matches!(bytes[i - 1], b' ' | b'\t') {
            return None;
        }
        if b == b':' && matches!(bytes.get(i + 1), None | Some(b' ') | Some(b'\t')) {
            let key = content[..i].trim_end();
            if key.is_empty() {
                return None;
            }
            return Some((key.to_string(), i + 1));
        }
    }
    None
}

fn read_single_line_quoted(content: &str) -> Option<(String, usize)> {
    let quote = content.chars().next()?;
    let mut out = String::new();
    let mut chars = content.char_indices().skip(1);
    while let Some((i, ch)) = chars.next() {
        if quote == '\'' && ch == '\'' {
            if content[i + 1..].starts_with('\'') {
                out.push('\'');
                chars.next();
                continue;
            }
            return Some((out, i + 1));
        }
        if quote == '"' && ch == '"' {
            return Some((out, i + 1));
        }
        if quote == '"' && ch == '\\' {
            let (_, esc) = chars.next()?;
            push_escape(&mut out, esc, &mut chars)?;
            continue;
        }
        out.push(ch);
    }
    None
}

fn push_escape(
    out: &mut String,
    esc: char,
    rest: &mut impl Iterator<Item = (usize, char)>,
) -> Option<()> {
    let simple = match esc {
        'n' => '\n',
        't' | '\t' => '\t',
        'r' => '\r',
        '0' => '\0',
        'a' => '\u{7}',
        'b' => '\u{8}',
        'e' => '\u{1b}',
        'f' => '\u{c}',
        'v' => '\u{b}',
        ' ' => ' ',
        '"' => '"',
        '/' => '/',
        '\\' => '\\',
        'N' => '\u{85}',
        '_' => '\u{a0}',
        'x' | 'u' | 'U' => {
            let width = match esc {
                'x' => 2,
                'u' => 4,
                _ => 8,
            };
            let mut code = 0u32;
            for _ in 0..width {
                let (_, h) = rest.next()?;
                code = code * 16 + h.to_digit(16)?;
            }
            char::from_u32(code)?
        }
        _ => return None,
    };
    out.push(simple);
    Some(())
}

/// Offset of a ` #` comment in a plain (unquoted) fragment.
fn comment_start(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    if bytes.first() == Some(&b'#') {
        return Some(0);
    }
    (1..bytes.len()).find(|&i| bytes[i] == b'#' && matches!(bytes[i - 1], b' ' | b'\t'))
}

pub(crate) fn parse_int(text: &str) -> Option<i64> {
    let (neg, digits) = match text.as_bytes().first()? {
        b'-' => (true, &text[1..]),
        b'+' => (false, &text[1..]),
        _ => (false, text),
    };
    let value = if let Some(hex) = digits.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()?
    } else if let Some(oct) = digits.strip_prefix("0o") {
        i64::from_str_radix(oct, 8).ok()?
    } else {
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse::<i64>().ok()?
    };
    Some(if neg { -value } else { value })
}

pub(crate) fn parse_float(text: &str) -> Option<f64> {
    match text {
        ".inf" | ".Inf" | ".INF" | "+.inf" | "+.Inf" | "+.INF" => return Some(f64::INFINITY),
        "-.inf" | "-.Inf" | "-.INF" => return Some(f64::NEG_INFINITY),
        ".nan" | ".NaN" | ".NAN" => return Some(f64::NAN),
        _ => {}
    }
    let body = text.strip_prefix(['-', '+']).unwrap_or(text);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let mantissa_ok = match mantissa.split_once('.') {
        Some((int, frac)) => {
            (!int.is_empty() || !frac.is_empty())
                && int.bytes().all(|b| b.is_ascii_digit())
                && frac.bytes().all(|b| b.is_ascii_digit())
        }
        None => !mantissa.is_empty() && mantissa.bytes().all(|b| b.is_ascii_digit()),
    };
    let exponent_ok = match exponent {
        None => true,
        Some(e) => {
            let e = e.strip_prefix(['-', '+']).unwrap_or(e);
            !e.is_empty() && e.bytes().all(|b| b.is_ascii_digit())
        }
    };
    if mantissa_ok && exponent_ok {
        text.parse::<f64>().ok()
    } else {
        None
    }
}

pub(crate) fn resolve_plain(text: &str) -> Scalar {
    let kind = match text {
        "" | "~" | "null" | "Null" | "NULL" => ScalarKind::Null,
        "true" | "True" | "TRUE" | "false" | "False" | "FALSE" => ScalarKind::Bool,
        _ if parse_int(text).is_some() => ScalarKind::Int,
        _ if parse_float(text).is_some() => ScalarKind::Float,
        _ => ScalarKind::Str,
    };
    Scalar {
        kind,
        text: text.to_string(),
    }
}

#[derive(Clone, Copy)]
struct Cursor<'a> {
    idx: usize,
    indent: usize,
    content: &'a str,
}

struct Parser<'a> {
    lines: &'a [&'a str],
    pos: usize,
    end: usize,
    /// A line re-entered at a column, for compact `- key: value` items.
    reentry: Option<(usize, usize)>,
    nodes: BTreeMap<String, Node>,
    diags: Vec<Diagnostic>,
}

impl<'a> Parser<'a> {
    fn new(lines: &'a [&'a str], start: usize, end: usize) -> Self {
        Parser {
            lines,
            pos: start,
            end,
            reentry: None,
            nodes: BTreeMap::new(),
            diags: Vec::new(),
        }
    }

    fn fail(&self, idx: usize, col: usize, message: impl Into<String>) -> ParseFailure {
        ParseFailure {
            line: idx as u32 + 1,
            column: col as u32 + 1,
            message: message.into(),
        }
    }

    fn parse_document(&mut self) -> PResult<()> {
        let Some(cur) = self.peek()? else {
            return Ok(());
        };
        let root = self.parse_block_at("", cur)?;
        if let Some(extra) = self.peek()? {
            return Err(self.fail(
                extra.idx,
                extra.indent,
                "unexpected content after the document root",
            ));
        }
        if !matches!(root, NodeValue::Mapping { .. }) {
            self.diags.push(Diagnostic::at(
                cur.idx as u32 + 1,
                "document root is not a mapping",
            ));
        }
        Ok(())
    }

    fn peek(&mut self) -> PResult<Option<Cursor<'a>>> {
        loop {
            if self.pos >= self.end {
                return Ok(None);
            }
            let line = self.lines[self.pos];
            if let Some((idx, col)) = self.reentry {
                if idx == self.pos {
                    return Ok(Some(Cursor {
                        idx,
                        indent: col,
                        content: &line[col..],
                    }));
                }
            }
            let indent = leading_spaces(line);
            let rest = &line[indent..];
            if rest.trim().is_empty() || rest.starts_with('#') {
                self.pos += 1;
                continue;
            }
            if rest.starts_with('\t') {
                return Err(self.fail(self.pos, indent, "tab character used for indentation"));
            }
            return Ok(Some(Cursor {
                idx: self.pos,
                indent,
                content: rest,
            }));
        }
    }

    fn consume_through(&mut self, idx: usize) {
        self.pos = idx + 1;
        self.reentry = None;
    }

    fn insert(&mut self, path: String, value: NodeValue, idx: usize) {
        self.nodes.insert(
            path,
            Node {
                value,
                line: idx as u32 + 1,
            },
        );
    }

    /// Drops an earlier occurrence of `path` (and its subtree). Returns true
    /// when something was replaced.
    fn replace_existing(&mut self, path: &str, idx: usize) -> bool {
        if !self.nodes.contains_key(path) {
            return false;
        }
        let prefix = alloc::format!("{path}/");
        self.nodes
            .retain(|k, _| k.as_str() != path && !k.starts_with(prefix.as_str()));
        self.diags.push(Diagnostic::at(
            idx as u32 + 1,
            alloc::format!("duplicate key `{path}`; keeping the last occurrence"),
        ));
        true
    }

    fn parse_block_at(&mut self, path: &str, cur: Cursor<'a>) -> PResult<NodeValue> {
        if is_seq_item(cur.content) {
            self.parse_sequence(path, cur.indent)
        } else if find_mapping_key(cur.content).is_some() {
            self.parse_mapping(path, cur.indent)
        } else {
            self.parse_inline_value(path, cur.indent as isize - 1, cur.idx, cur.indent, false)
        }
    }

    fn parse_mapping(&mut self, path: &str, indent: usize) -> PResult<NodeValue> {
        let mut len = 0;
        while let Some(cur) = self.peek()? {
            if cur.indent < indent {
                break;
            }
            if cur.indent > indent {
                return Err(self.fail(cur.idx, cur.indent, "unexpected indentation"));
            }
            if is_seq_item(cur.content) {
                return Err(self.fail(
                    cur.idx,
                    cur.indent,
                    "sequence item where a mapping key was expected",
                ));
            }
            let Some((key, after)) = find_mapping_key(cur.content) else {
                return Err(self.fail(cur.idx, cur.indent, "expected a `key: value` entry"));
            };
            let child = KeyPath::child_key(path, &key);
            let replaced = self.replace_existing(&child, cur.idx);
            let value = self.parse_inline_value(
                &child,
                indent as isize,
                cur.idx,
                cur.indent + after,
                true,
            )?;
            self.insert(child, value, cur.idx);
            if !replaced {
                len += 1;
            }
        }
        Ok(NodeValue::Mapping { len })
    }

    fn parse_sequence(&mut self, path: &str, indent: usize) -> PResult<NodeValue> {
        let mut len = 0;
        while let Some(cur) = self.peek()? {
            if cur.indent < indent {
                break;
            }
            if cur.indent > indent {
                return Err(self.fail(cur.idx, cur.indent, "unexpected indentation"));
            }
            if !is_seq_item(cur.content) {
                break;
            }
            let child = KeyPath::child_index(path, len);
            let after_dash = &cur.content[1..];
            let gap = after_dash.len() - after_dash.trim_start_matches([' ', '\t']).len();
            let rest_col = cur.indent + 1 + gap;
            let rest = &after_dash[gap..];
            let value = if !rest.is_empty()
                && !rest.starts_with('#')
                && (is_seq_item(rest) || find_mapping_key(rest).is_some())
            {
                self.reentry = Some((cur.idx, rest_col));
                let sub = Cursor {
                    idx: cur.idx,
                    indent: rest_col,
                    content: rest,
                };
                self.parse_block_at(&child, sub)?
            } else {
                self.parse_inline_value(&child, indent as isize, cur.idx, rest_col, false)?
            };
            self.insert(child, value, cur.idx);
            len += 1;
        }
        Ok(NodeValue::Sequence { len })
    }

    /// Parses the value starting at (`idx`, `col`) whose owner sits at
    /// `parent_indent`. Always consumes line `idx`.
    fn parse_inline_value(
        &mut self,
        path: &str,
        parent_indent: isize,
        idx: usize,
        col: usize,
        allow_same_indent_seq: bool,
    ) -> PResult<NodeValue> {
        let line = self.lines[idx];
        let mut col = col.min(line.len());
        loop {
            let rest = &line[col..];
            let trimmed = rest.trim_start_matches([' ', '\t']);
            col += rest.len() - trimmed.len();
            if trimmed.starts_with('&') || trimmed.starts_with('!') {
                let token = trimmed.find([' ', '\t']).unwrap_or(trimmed.len());
                col += token;
                continue;
            }
            break;
        }
        let rest = &line[col..];

        if rest.is_empty() || rest.starts_with('#') {
            self.consume_through(idx);
            return match self.peek()? {
                Some(next) if next.indent as isize > parent_indent => {
                    self.parse_block_at(path, next)
                }
                Some(next)
                    if allow_same_indent_seq
                        && next.indent as isize == parent_indent
                        && is_seq_item(next.content) =>
                {
                    self.parse_sequence(path, next.indent)
                }
                _ => Ok(NodeValue::Scalar(Scalar::null())),
            };
        }

        match rest.as_bytes()[0] {
            b'|' | b'>' => self.parse_block_scalar(parent_indent, idx, col),
            b'[' | b'{' => {
                let mut flow = Flow {
                    idx,
                    col,
                    end: self.end,
                };
                let value = flow.node(self, path)?;
                let tail = &self.lines[flow.idx][flow.col..];
                let tail = tail.trim_start();
                if !tail.is_empty() && !tail.starts_with('#') {
                    return Err(self.fail(
                        flow.idx,
                        flow.col,
                        "unexpected content after flow collection",
                    ));
                }
                self.consume_through(flow.idx);
                Ok(value)
            }
            b'"' | b'\'' => {
                let (text, end_idx, end_col) = read_quoted(self.lines, self.end, idx, col)
                    .ok_or_else(|| self.fail(idx, col, "unterminated quoted scalar"))?;
                let tail = self.lines[end_idx][end_col..].trim_start();
                if !tail.is_empty() && !tail.starts_with('#') {
                    return Err(self.fail(
                        end_idx,
                        end_col,
                        "unexpected content after quoted scalar",
                    ));
                }
                self.consume_through(end_idx);
                Ok(NodeValue::Scalar(Scalar::string(text)))
            }
            _ => {
                let text = match comment_start(rest) {
                    Some(c) => rest[..c].trim_end(),
                    None => rest.trim_end(),
                };
                if text.contains(": ") || text.ends_with(':') && !text.starts_with('*') {
                    return Err(self.fail(idx, col, "mapping values are not allowed here"));
                }
                let mut folded = String::from(text);
                self.consume_through(idx);
                while let Some(next) = self.peek()? {
                    if next.indent as isize <= parent_indent {
                        break;
                    }
                    if find_mapping_key(next.content).is_some() || is_seq_item(next.content) {
                        return Err(self.fail(
                            next.idx,
                            next.indent,
                            "mapping values are not allowed here",
                        ));
                    }
                    let piece = match comment_start(next.content) {
                        Some(c) => next.content[..c].trim_end(),
                        None => next.content.trim_end(),
                    };
                    folded.push(' ');
                    folded.push_str(piece);
                    self.consume_through(next.idx);
                }
                if text.starts_with('*') {
                    return Ok(NodeValue::Scalar(Scalar::string(folded)));
                }
                Ok(NodeValue::Scalar(resolve_plain(&folded)))
            }
        }
    }

    fn parse_block_scalar(
        &mut self,
        parent_indent: isize,
        idx: usize,
        col: usize,
    ) -> PResult<NodeValue> {
        let line = self.lines[idx];
        let header = &line[col..];
        let literal = header.starts_with('|');
        let mut chomp = 0i8; // -1 strip, 0 clip, 1 keep
        let mut explicit = None;
        let mut consumed = 1;
        for ch in header[1..].chars() {
            match ch {
                '-' => chomp = -1,
                '+' => chomp = 1,
                '1'..='9' => explicit = ch.to_digit(10).map(|d| d as usize),
                _ => break,
            }
            consumed += 1;
        }
        let tail = header[consumed..].trim_start();
        if !tail.is_empty() && !tail.starts_with('#') {
            return Err(self.fail(
                idx,
                col + consumed,
                "unexpected text after block scalar header",
            ));
        }
        let base = parent_indent.max(0) as usize;
        let content_indent = match explicit {
            Some(d) => base + d,
            None => {
                let first = (idx + 1..self.end).find(|&j| !self.lines[j].trim().is_empty());
                match first {
                    Some(j) if leading_spaces(self.lines[j]) as isize > parent_indent => {
                        leading_spaces(self.lines[j])
                    }
                    _ => usize::MAX,
                }
            }
        };

        let mut body: Vec<&str> = Vec::new();
        let mut j = idx + 1;
        let mut last_consumed = idx;
        if content_indent != usize::MAX {
            while j < self.end {
                let l = self.lines[j];
                if l.trim().is_empty() {
                    body.push("");
                } else if leading_spaces(l) >= content_indent {
                    body.push(&l[content_indent..]);
                } else {
                    break;
                }
                last_consumed = j;
                j += 1;
            }
        }
        let trailing_blank = body.iter().rev().take_while(|l| l.is_empty()).count();
        let kept = &body[..body.len() - trailing_blank];

        let mut text = String::new();
        if literal {
            for (i, l) in kept.iter().enumerate() {
                if i > 0 {
                    text.push('\n');
                }
                text.push_str(l);
            }
        } else {
            let mut prev_more_indented = false;
            for (i, l) in kept.iter().enumerate() {
                let more_indented = l.starts_with(' ') || l.starts_with('\t');
                if i > 0 {
                    if l.is_empty() || kept[i - 1].is_empty() || more_indented || prev_more_indented
                    {
                        text.push('\n');
                    } else {
                        text.push(' ');
                    }
                }
                text.push_str(l);
                prev_more_indented = more_indented;
            }
        }
        match chomp {
            -1 => {}
            0 => {
                if !kept.is_empty() {
                    text.push('\n');
                }
            }
            _ => {
                if !kept.is_empty() {
                    text.push('\n');
                }
                for _ in 0..trailing_blank {
                    text.push('\n');
                }
            }
        }
        self.consume_through(last_consumed);
        Ok(NodeValue::Scalar(Scalar::string(text)))
    }
}

/// Reads a single- or double-quoted scalar that may continue over lines.
/// Returns the decoded text plus the line and column just past the closing quote.
fn read_quoted(
    lines: &[&str],
    end: usize,
    idx: usize,
    col: usize,
) -> Option<(String, usize, usize)> {
    let quote = lines[idx][col..].chars().next()?;
    let mut out = String::new();
    let mut line_idx = idx;
    let mut pos = col + 1;
    loop {
        let line = lines[line_idx];
        let base = pos;
        let mut chars = line[base..]
            .char_indices()
            .map(move |(i, c)| (i + base, c))
            .peekable();
        let mut escaped_break = false;
        while let Some((i, ch)) = chars.next() {
            if ch == quote {
                if quote == '\'' && matches!(chars.peek(), Some((_, '\''))) {
                    out.push('\'');
                    chars.next();
                    continue;
                }
                return Some((out, line_idx, i + 1));
            }
            if quote == '"' && ch == '\\' {
                match chars.next() {
                    Some((_, esc)) => push_escape(&mut out, esc, &mut chars)?,
                    None => escaped_break = true,
                }
                continue;
            }
            out.push(ch);
        }
        if !escaped_break {
            let trimmed_len = out.trim_end_matches([' ', '\t']).len();
            out.truncate(trimmed_len);
        }
        line_idx += 1;
        let mut blank = 0;
        while line_idx < end && lines[line_idx].trim().is_empty() {
            blank += 1;
            line_idx += 1;
        }
        if line_idx >= end {
            return None;
        }
        if blank > 0 {
            for _ in 0..blank {
                out.push('\n');
            }
        } else if !escaped_break {
            out.push(' ');
        }
        let next = lines[line_idx];
        pos = next.len() - next.trim_start_matches([' ', '\t']).len();
    }
}

struct Flow {
    idx: usize,
    col: usize,
    end: usize,
}

impl Flow {
    fn byte(&self, parser: &Parser<'_>) -> Option<u8> {
        parser.lines[self.idx].as_bytes().get(self.col).copied()
    }

    fn skip_ws(&mut self, parser: &Parser<'_>) -> PResult<()> {
        loop {
            if self.idx >= self.end {
                return Err(parser.fail(
                    self.end.saturating_sub(1),
                    0,
                    "unterminated flow collection",
                ));
            }
            let bytes = parser.lines[self.idx].as_bytes();
            while self.col < bytes.len() && matches!(bytes[self.col], b' ' | b'\t') {
                self.col += 1;
            }
            let at_comment = self.col < bytes.len()
                && bytes[self.col] == b'#'
                && (self.col == 0 || matches!(bytes[self.col - 1], b' ' | b'\t'));
            if self.col >= bytes.len() || at_comment {
                self.idx += 1;
                self.col = 0;
                continue;
            }
            return Ok(());
        }
    }

    fn node(&mut self, parser: &mut Parser<'_>, path: &str) -> PResult<NodeValue> {
        self.skip_ws(parser)?;
        match self.byte(parser) {
            Some(b'[') => {
                self.col += 1;
                let mut len = 0;
                loop {
                    self.skip_ws(parser)?;
                    if self.byte(parser) == Some(b']') {
                        self.col += 1;
                        break;
                    }
                    let item_idx = self.idx;
                    let child = KeyPath::child_index(path, len);
                    let value = self.node(parser, &child)?;
                    parser.insert(child, value, item_idx);
                    len += 1;
                    self.skip_ws(parser)?;
                    match self.byte(parser) {
                        Some(b',') => self.col += 1,
                        Some(b']') => {
                            self.col += 1;
                            break;
                        }
                        _ => return Err(parser.fail(self.idx, self.col, "expected `,` or `]`")),
                    }
                }
                Ok(NodeValue::Sequence { len })
            }
            Some(b'{') => {
                self.col += 1;
                let mut len = 0;
                loop {
                    self.skip_ws(parser)?;
                    if self.byte(parser) == Some(b'}') {
                        self.col += 1;
                        break;
                    }
                    let key_idx = self.idx;
                    let key = self.key(parser)?;
                    self.skip_ws(parser)?;
                    if self.byte(parser) != Some(b':') {
                        return Err(parser.fail(
                            self.idx,
                            self.col,
                            "expected `:` after flow mapping key",
                        ));
                    }
                    self.col += 1;
                    self.skip_ws(parser)?;
                    let child = KeyPath::child_key(path, &key);
                    let replaced = parser.replace_existing(&child, key_idx);
                    let value = match self.byte(parser) {
                        Some(b',') | Some(b'}') => NodeValue::Scalar(Scalar::null()),
                        _ => self.node(parser, &child)?,
                    };
                    parser.insert(child, value, key_idx);
                    if !replaced {
                        len += 1;
                    }
                    self.skip_ws(parser)?;
                    match self.byte(parser) {
                        Some(b',') => self.col += 1,
                        Some(b'}') => {
                            self.col += 1;
                            break;
                        }
                        _ => return Err(parser.fail(self.idx, self.col, "expected `,` or `}`")),
                    }
                }
                Ok(NodeValue::Mapping { len })
            }
            Some(b'"') | Some(b'\'') => {
                let (text, idx, col) = read_quoted(parser.lines, self.end, self.idx, self.col)
                    .ok_or_else(|| parser.fail(self.idx, self.col, "unterminated quoted scalar"))?;
                self.idx = idx;
                self.col = col;
                Ok(NodeValue::Scalar(Scalar::string(text)))
            }
            _ => {
                let text = self.plain(parser, false);
                if text.is_empty() {
                    return Err(parser.fail(
                        self.idx,
                        self.col,
                        "unexpected character in flow collection",
                    ));
                }
                Ok(NodeValue::Scalar(resolve_plain(text.trim())))
            }
        }
    }

    fn key(&mut self, parser: &Parser<'_>) -> PResult<String> {
        match self.byte(parser) {
            Some(b'"') | Some(b'\'') => {
                let (text, idx, col) = read_quoted(parser.lines, self.end, self.idx, self.col)
                    .ok_or_else(|| parser.fail(self.idx, self.col, "unterminated quoted key"))?;
                self.idx = idx;
                self.col = col;
                Ok(text)
            }
            _ => {
                let text = self.plain(parser, true);
                if text.trim().is_empty() {
                    return Err(parser.fail(self.idx, self.col, "empty flow mapping key"));
                }
                Ok(text.trim().to_string())
            }
        }
    }

    fn plain<'p>(&mut self, parser: &Parser<'p>, is_key: bool) -> &'p str {
        let line = parser.lines[self.idx];
        let bytes = line.as_bytes();
        let start = self.col;
        let mut i = start;
        while i < bytes.len() {
            let b = bytes[i];
            if matches!(b, b',' | b']' | b'}' | b'[' | b'{') {
                break;
            }
            if b == b':' && (is_key || matches!(bytes.get(i + 1), None | Some(b' ') | Some(b','))) {
                break;
            }
            if b == b'#' && i > start && matches!(bytes[i - 1], b' ' | b'\t') {
                break;
            }
            i += 1;
        }
        self.col = i;
        &line[start..i]
    }
}
