//! Prompt construction for user-preference and item-understanding
//! summaries. Output is a pure function of the inputs.

use std::fmt::Write;

use sha2::{Digest, Sha256};

use crate::datasets::{ItemCatalog, ItemText};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    User,
    Item,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptText {
    pub kind: PromptKind,
    pub body: String,
}

impl PromptText {
    /// Hex SHA-256 of the body; the key for fixture record/replay.
    pub fn sha256(&self) -> String {
        prompt_sha256(&self.body)
    }
}

pub fn prompt_sha256(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

pub const MAX_DESCRIPTION_CHARS: usize = 256;
pub const MAX_CONTEXT_SEQUENCES: usize = 10;
/// Most recent items rendered per context sequence in item prompts.
pub const MAX_CONTEXT_ITEMS: usize = 20;

const USER_INSTRUCTION: &str = "\
Task: Based on the items above and the order in which they were consumed, \
describe this user's preferences. Cover the categories, brands, price or \
quality level and styles the user favours, how their interests shift over \
time, and what kind of item they are likely to want next. Answer in one \
concise paragraph.";

const ITEM_INSTRUCTION: &str = "\
Task: Using the item's attributes and the interaction sequences it appears \
in, summarize what this item is, which kinds of users it appeals to, and \
which other items it is typically consumed with or could substitute for. \
Answer in one concise paragraph.";

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

fn render_attributes(text: &ItemText, out: &mut String) {
    let mut first = true;
    let mut field = |name: &str, value: &Option<String>, out: &mut String| {
        if let Some(v) = value {
            if !first {
                out.push_str("; ");
            }
            first = false;
            let _ = write!(out, "{name}: {v}");
        }
    };
    field("Title", &text.title, out);
    field("Category", &text.category, out);
    field("Brand", &text.brand, out);
    let desc = text
        .description
        .as_deref()
        .map(|d| truncate_chars(d, MAX_DESCRIPTION_CHARS).to_owned());
    field("Description", &desc, out);
    if first {
        out.push_str("(no attributes)");
    }
}

fn item_entry(item: u32, catalog: &ItemCatalog, out: &mut String) {
    match catalog.get(item) {
        Some(text) => render_attributes(text, out),
        None => {
            tracing::warn!(item, "item missing from catalog; using placeholder");
            let _ = write!(out, "Title: unknown item {item}");
        }
    }
}

fn item_label(item: u32, catalog: &ItemCatalog) -> String {
    catalog
        .get(item)
        .and_then(|t| t.title.clone())
        .unwrap_or_else(|| format!("item {item}"))
}

/// Chronological numbered item list followed by the preference instruction.
pub fn build_user_prompt(items: &[u32], catalog: &ItemCatalog) -> PromptText {
    let mut body = String::from(
        "A user interacted with the following items, listed in chronological order (oldest first):\n",
    );
    for (i, &item) in items.iter().enumerate() {
        let _ = write!(body, "{}. ", i + 1);
        item_entry(item, catalog, &mut body);
        body.push('\n');
    }
    body.push('\n');
    body.push_str(USER_INSTRUCTION);
    PromptText {
        kind: PromptKind::User,
        body,
    }
}

/// Picks up to [`MAX_CONTEXT_SEQUENCES`] containing sequences: longest
/// first, ties by position in `containing`.
pub fn select_context_sequences<'a>(containing: &[&'a [u32]]) -> Vec<&'a [u32]> {
    let mut order: Vec<usize> = (0..containing.len()).collect();
    order.sort_by(|&a, &b| containing[b].len().cmp(&containing[a].len()).then(a.cmp(&b)));
    order
        .into_iter()
        .take(MAX_CONTEXT_SEQUENCES)
        .map(|i| containing[i])
        .collect()
}

/// Item attributes, then the selected containing sequences, then the item
/// instruction.
pub fn build_item_prompt(item: u32, catalog: &ItemCatalog, containing: &[&[u32]]) -> PromptText {
    let mut body = String::from("Item attributes:\n");
    item_entry(item, catalog, &mut body);
    body.push('\n');
    let selected = select_context_sequences(containing);
    if !selected.is_empty() {
        body.push_str(
            "\nThe item appears in these user interaction sequences (oldest first; [*] marks the item):\n",
        );
        for (i, seq) in selected.iter().enumerate() {
            let _ = write!(body, "Sequence {}: ", i + 1);
            let recent = &seq[seq.len().saturating_sub(MAX_CONTEXT_ITEMS)..];
            for (j, &other) in recent.iter().enumerate() {
                if j > 0 {
                    body.push_str(" -> ");
                }
                body.push_str(&item_label(other, catalog));
                if other == item {
                    body.push_str(" [*]");
                }
            }
            body.push('\n');
        }
    }
    body.push('\n');
    body.push_str(ITEM_INSTRUCTION);
    PromptText {
        kind: PromptKind::Item,
        body,
    }
}

/// Attribute text of a sequence without any summarization step.
pub fn raw_user_text(items: &[u32], catalog: &ItemCatalog) -> String {
    let mut out = String::new();
    for &item in items {
        item_entry(item, catalog, &mut out);
        out.push('\n');
    }
    out
}

pub fn raw_item_text(item: u32, catalog: &ItemCatalog) -> String {
    let mut out = String::new();
    item_entry(item, catalog, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> ItemCatalog {
        ItemCatalog::from_entries(vec![
            ItemText {
                title: Some("Red Lipstick".into()),
                category: Some("Makeup".into()),
                brand: Some("Acme".into()),
                description: Some("A bold red.".into()),
            },
            ItemText {
                title: Some("Face Wash".into()),
                category: Some("Skincare".into()),
                brand: None,
                description: None,
            },
            ItemText {
                title: Some("Serum".into()),
                category: Some("Skincare".into()),
                brand: Some("Glow".into()),
                description: Some("x".repeat(400)),
            },
        ])
    }

    #[test]
    fn user_prompt_lists_items_in_order() {
        let p = build_user_prompt(&[3, 1, 2], &catalog());
        assert_eq!(p.kind, PromptKind::User);
        let a = p.body.find("1. Title: Serum").unwrap();
        let b = p.body.find("2. Title: Red Lipstick").unwrap();
        let c = p.body.find("3. Title: Face Wash").unwrap();
        assert!(a < b && b < c);
        assert_eq!(p, build_user_prompt(&[3, 1, 2], &catalog()));
    }

    #[test]
    fn empty_description_is_omitted() {
        let p = build_user_prompt(&[2], &catalog());
        let entry = p.body.lines().find(|l| l.starts_with("1. ")).unwrap();
        assert_eq!(entry, "1. Title: Face Wash; Category: Skincare");
    }

    #[test]
    fn long_descriptions_are_truncated() {
        let p = build_user_prompt(&[3], &catalog());
        let entry = p.body.lines().find(|l| l.starts_with("1. ")).unwrap();
        let desc = entry.split("Description: ").nth(1).unwrap();
        assert_eq!(desc.chars().count(), MAX_DESCRIPTION_CHARS);
    }

    #[test]
    fn unknown_item_gets_placeholder() {
        let p = build_user_prompt(&[99], &catalog());
        assert!(p.body.contains("1. Title: unknown item 99"));
    }

    #[test]
    fn item_prompt_context_limits() {
        let cat = catalog();
        let three: Vec<Vec<u32>> = vec![vec![1, 2], vec![2, 1, 3], vec![1]];
        let refs: Vec<&[u32]> = three.iter().map(Vec::as_slice).collect();
        let p = build_item_prompt(1, &cat, &refs);
        assert_eq!(p.body.matches("Sequence ").count(), 3);

        let many: Vec<Vec<u32>> = (0..25).map(|i| vec![1; 1 + i % 7]).collect();
        let refs: Vec<&[u32]> = many.iter().map(Vec::as_slice).collect();
        let p = build_item_prompt(1, &cat, &refs);
        assert_eq!(p.body.matches("Sequence ").count(), 10);
        let chosen = select_context_sequences(&refs);
        // lengths 7, 6 and 5 occur three times each, then one of the 4s
        assert_eq!(chosen.iter().filter(|s| s.len() >= 5).count(), 9);
        assert_eq!(chosen[9].len(), 4);
        assert!(chosen.windows(2).all(|w| w[0].len() >= w[1].len()));

        let p = build_item_prompt(1, &cat, &[]);
        assert!(!p.body.contains("Sequence"));
        assert!(p.body.starts_with("Item attributes:\nTitle: Red Lipstick"));
    }

    #[test]
    fn snapshot_of_small_user_prompt() {
        let p = build_user_prompt(&[1, 2], &catalog());
        let expected = format!(
            "A user interacted with the following items, listed in chronological order (oldest first):\n\
             1. Title: Red Lipstick; Category: Makeup; Brand: Acme; Description: A bold red.\n\
             2. Title: Face Wash; Category: Skincare\n\n{USER_INSTRUCTION}"
        );
        assert_eq!(p.body, expected);
    }
}
