//! Region-list extraction from free-form model replies.

use std::sync::LazyLock;

use regex::Regex;

pub const MAX_REGION_WORDS: usize = 10;

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)(?:^|\s)\(?\d{1,2}[.)]\s+").unwrap());
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[-*•]\s+").unwrap());

fn clean(item: &str) -> Option<String> {
    // Keep the name, drop any trailing explanation.
    let head = item
        .lines()
        .next()
        .unwrap_or("")
        .split([':', '(', '—'])
        .next()
        .unwrap_or("")
        .split(" - ")
        .next()
        .unwrap_or("");
    let mut name = head
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '"' | '\'' | '`' | '.' | ',' | ';'))
        .to_string();
    if let Some(rest) = name.strip_prefix("and ") {
        name = rest.trim().to_string();
    }
    (!name.is_empty()).then_some(name)
}

/// Splits a reply into region names.
///
/// Accepts numbered lists (inline or one per line), bullet lists, and
/// comma/semicolon separated text, tried in that order. Returns `None` when
/// no list structure is found or an item exceeds [`MAX_REGION_WORDS`] words.
pub fn parse_region_list(reply: &str) -> Option<Vec<String>> {
    let reply = reply.trim();
    if reply.is_empty() {
        return None;
    }
    let items: Vec<String> = if NUMBERED.is_match(reply) {
        let starts: Vec<_> = NUMBERED.find_iter(reply).collect();
        starts
            .iter()
            .enumerate()
            .filter_map(|(i, m)| {
                let end = starts.get(i + 1).map_or(reply.len(), |n| n.start());
                clean(&reply[m.end()..end])
            })
            .collect()
    } else if reply.lines().any(|l| BULLET.is_match(l)) {
        reply
            .lines()
            .filter(|l| BULLET.is_match(l))
            .filter_map(|l| clean(&BULLET.replace(l, "")))
            .collect()
    } else {
        // A lone "Regions:" style preamble is not an item.
        let body = match reply.split_once(':') {
            Some((pre, rest)) if !pre.contains([',', ';']) && !rest.trim().is_empty() => rest,
            _ => reply,
        };
        body.split([',', ';', '\n']).filter_map(clean).collect()
    };
    if items.is_empty() || items.iter().any(|i| i.split_whitespace().count() > MAX_REGION_WORDS) {
        return None;
    }
    Some(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Vec<String> {
        parse_region_list(s).unwrap()
    }

    #[test]
    fn inline_numbered() {
        assert_eq!(
            p("1. white fur 2. upright ears 3. softly angular face"),
            vec!["white fur", "upright ears", "softly angular face"]
        );
    }

    #[test]
    fn numbered_lines_with_preamble_and_explanations() {
        let reply = "Here are the regions:\n1) Crown: a bright red patch\n2) Wing bars - two white bars\n3) **Tail**.";
        assert_eq!(p(reply), vec!["Crown", "Wing bars", "Tail"]);
    }

    #[test]
    fn bullets() {
        assert_eq!(p("- beak\n* eye ring\n• nape"), vec!["beak", "eye ring", "nape"]);
    }

    #[test]
    fn comma_and_semicolon() {
        assert_eq!(
            p("white fur, upright ears, and softly angular face"),
            vec!["white fur", "upright ears", "softly angular face"]
        );
        assert_eq!(p("Regions: crown; nape; throat"), vec!["crown", "nape", "throat"]);
    }

    #[test]
    fn single_item() {
        assert_eq!(p("1. white fur"), vec!["white fur"]);
        assert_eq!(p("white fur"), vec!["white fur"]);
    }

    #[test]
    fn rejects_empty_and_overlong() {
        assert!(parse_region_list("   ").is_none());
        assert!(parse_region_list("1. this region name is clearly far too long to be a short region name").is_none());
    }
}
