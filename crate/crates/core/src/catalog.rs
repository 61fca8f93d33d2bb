//! Item catalog: deterministic title tokenization and the prefix trie that
//! defines which items remain reachable under every decoding prefix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type NodeId = usize;

/// Terminal sentinel appended to every item's token sequence.
pub const EOS_TOKEN: &str = "<eos>";

/// Dense catalog index. Ordering follows the catalog's external id order,
/// so "smallest id" tie-breaks are comparisons on this value.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct ItemIdx(pub u32);

impl ItemIdx {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Word,
    Char,
}

impl std::str::FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenizerMode::Word),
            "char" => Ok(TokenizerMode::Char),
            other => Err(Error::InvalidConfig(format!(
                "tokenizer mode must be word or char, got {other:?}"
            ))),
        }
    }
}

/// Splits a title into token strings. Word mode lowercases and keeps maximal
/// alphanumeric runs; char mode keeps every scalar value of the trimmed title.
pub fn split_title(title: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Word => title
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_owned)
            .collect(),
        TokenizerMode::Char => title.trim().chars().map(String::from).collect(),
    }
}

/// The normalized surface form a title decodes back to.
pub fn normalize_title(title: &str, mode: TokenizerMode) -> String {
    let parts = split_title(title, mode);
    match mode {
        TokenizerMode::Word => parts.join(" "),
        TokenizerMode::Char => parts.concat(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    mode: TokenizerMode,
}

impl Vocabulary {
    /// Ids are assigned in first-seen order; the sentinel is appended last.
    pub fn build<S: AsRef<str>>(titles: &[S], mode: TokenizerMode) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, title) in titles.iter().enumerate() {
            let parts = split_title(title.as_ref(), mode);
            if parts.is_empty() {
                return Err(Error::EmptyTitle { index: i });
            }
            for p in parts {
                if !index.contains_key(&p) {
                    index.insert(p.clone(), tokens.len() as TokenId);
                    tokens.push(p);
                }
            }
        }
        if titles.is_empty() {
            return Err(Error::EmptyTitle { index: 0 });
        }
        let eos = tokens.len() as TokenId;
        index.insert(EOS_TOKEN.to_owned(), eos);
        tokens.push(EOS_TOKEN.to_owned());
        Ok(Vocabulary {
            tokens,
            index,
            eos,
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes a title and appends the sentinel.
    pub fn encode(&self, title: &str) -> Result<Vec<TokenId>> {
        let parts = split_title(title, self.mode);
        let mut ids = Vec::with_capacity(parts.len() + 1);
        for p in parts {
            let id = self
                .id(&p)
                .filter(|&id| id != self.eos)
                .ok_or_else(|| Error::UnknownToken { token: p.clone() })?;
            ids.push(id);
        }
        ids.push(self.eos);
        Ok(ids)
    }

    /// Inverse of [`Vocabulary::encode`]; stops at the sentinel.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&id| id != self.eos)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect();
        match self.mode {
            TokenizerMode::Word => words.join(" "),
            TokenizerMode::Char => words.concat(),
        }
    }
}

pub fn build_vocabulary<S: AsRef<str>>(titles: &[S], mode: TokenizerMode) -> Result<Vocabulary> {
    Vocabulary::build(titles, mode)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawItem {
    pub item_id: String,
    pub title: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemTokenization {
    pub item: ItemIdx,
    /// Ends with the sentinel, which occurs nowhere else.
    pub tokens: Vec<TokenId>,
}

impl ItemTokenization {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Tokenizes items in order; item `k` of `raw` becomes `ItemIdx(k)`.
pub fn tokenize_items(raw: &[RawItem], vocab: &Vocabulary) -> Result<Vec<ItemTokenization>> {
    raw.iter()
        .enumerate()
        .map(|(k, r)| {
            Ok(ItemTokenization {
                item: ItemIdx(k as u32),
                tokens: vocab.encode(&r.title)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrieNode {
    /// Sorted by token id.
    children: Vec<(TokenId, NodeId)>,
    /// Sorted item indices whose sequence passes through this node.
    items: Vec<ItemIdx>,
    depth: usize,
}

impl TrieNode {
    pub fn children(&self) -> &[(TokenId, NodeId)] {
        &self.children
    }

    pub fn items(&self) -> &[ItemIdx] {
        &self.items
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    fn child(&self, token: TokenId) -> Option<NodeId> {
        self.children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|k| self.children[k].1)
    }
}

#[derive(Clone, Debug)]
pub struct PrefixTrie {
    nodes: Vec<TrieNode>,
}

impl PrefixTrie {
    pub const ROOT: NodeId = 0;

    pub fn build(items: &[ItemTokenization]) -> Self {
        let mut nodes = vec![TrieNode::default()];
        for it in items {
            let mut cur = Self::ROOT;
            nodes[cur].items.push(it.item);
            for &tok in &it.tokens {
                let next = match nodes[cur].child(tok) {
                    Some(n) => n,
                    None => {
                        let id = nodes.len();
                        let depth = nodes[cur].depth + 1;
                        nodes.push(TrieNode {
                            depth,
                            ..TrieNode::default()
                        });
                        let kids = &mut nodes[cur].children;
                        let pos = kids.partition_point(|&(t, _)| t < tok);
                        kids.insert(pos, (tok, id));
                        id
                    }
                };
                cur = next;
                nodes[cur].items.push(it.item);
            }
        }
        for n in &mut nodes {
            n.items.sort_unstable();
            n.items.dedup();
        }
        PrefixTrie { nodes }
    }

    pub fn node(&self, id: NodeId) -> &TrieNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1 && self.nodes[0].items.is_empty()
    }

    pub fn child(&self, node: NodeId, token: TokenId) -> Option<NodeId> {
        self.nodes[node].child(token)
    }

    /// Node reached by following `prefix` from the root, if any.
    pub fn locate(&self, prefix: &[TokenId]) -> Option<NodeId> {
        prefix
            .iter()
            .try_fold(Self::ROOT, |node, &tok| self.child(node, tok))
    }

    /// Items whose token sequence begins with `prefix`; empty when the prefix
    /// leaves the catalog.
    pub fn candidate_set(&self, prefix: &[TokenId]) -> &[ItemIdx] {
        match self.locate(prefix) {
            Some(n) => &self.nodes[n].items,
            None => &[],
        }
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Depth-first walk yielding (prefix, node) for every node, children in
    /// token order.
    pub fn walk(&self) -> Vec<(Vec<TokenId>, NodeId)> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(Vec::new(), Self::ROOT)];
        while let Some((prefix, node)) = stack.pop() {
            for &(tok, child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(tok);
                stack.push((p, child));
            }
            out.push((prefix, node));
        }
        out
    }

    /// One line per node: space-separated prefix tokens, a tab, the
    /// candidate count.
    pub fn debug_dump(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        for (prefix, node) in self.walk() {
            let toks: Vec<&str> = prefix
                .iter()
                .map(|&t| vocab.token(t).unwrap_or("<unk>"))
                .collect();
            let _ = writeln!(s, "{}\t{}", toks.join(" "), self.nodes[node].items.len());
        }
        s
    }
}

pub fn build_trie(items: &[ItemTokenization]) -> PrefixTrie {
    PrefixTrie::build(items)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub id: String,
    pub title: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    items: Vec<CatalogItem>,
    vocab: Vocabulary,
    trie: PrefixTrie,
    by_id: HashMap<String, ItemIdx>,
}

impl Catalog {
    /// Builds the catalog from raw records. Records are ordered by external
    /// id; items whose title normalizes to nothing are dropped with a
    /// warning.
    pub fn from_raw(mut raw: Vec<RawItem>, mode: TokenizerMode) -> Result<Self> {
        raw.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        for w in raw.windows(2) {
            if w[0].item_id == w[1].item_id {
                return Err(Error::format(
                    "item metadata",
                    format!("duplicate item id {:?}", w[0].item_id),
                ));
            }
        }
        raw.retain(|r| {
            let keep = !split_title(&r.title, mode).is_empty();
            if !keep {
                log::warn!("dropping item {:?}: empty title", r.item_id);
            }
            keep
        });
        if raw.is_empty() {
            return Err(Error::EmptyTitle { index: 0 });
        }
        let titles: Vec<&str> = raw.iter().map(|r| r.title.as_str()).collect();
        let vocab = Vocabulary::build(&titles, mode)?;
        let toks = tokenize_items(&raw, &vocab)?;
        let trie = PrefixTrie::build(&toks);
        let by_id = raw
            .iter()
            .enumerate()
            .map(|(k, r)| (r.item_id.clone(), ItemIdx(k as u32)))
            .collect();
        let items = raw
            .into_iter()
            .zip(toks)
            .map(|(r, t)| CatalogItem {
                id: r.item_id,
                title: r.title,
                tokens: t.tokens,
            })
            .collect();
        Ok(Catalog {
            items,
            vocab,
            trie,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn item(&self, idx: ItemIdx) -> &CatalogItem {
        &self.items[idx.index()]
    }

    pub fn tokens(&self, idx: ItemIdx) -> &[TokenId] {
        &self.items[idx.index()].tokens
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn trie(&self) -> &PrefixTrie {
        &self.trie
    }

    pub fn lookup(&self, id: &str) -> Option<ItemIdx> {
        self.by_id.get(id).copied()
    }

    pub fn tokenizations(&self) -> Vec<ItemTokenization> {
        self.items
            .iter()
            .enumerate()
            .map(|(k, it)| ItemTokenization {
                item: ItemIdx(k as u32),
                tokens: it.tokens.clone(),
            })
            .collect()
    }

    /// Maps a complete token sequence (with sentinel) to the smallest item id
    /// carrying it.
    pub fn resolve(&self, tokens: &[TokenId]) -> Option<ItemIdx> {
        let node = self.trie.locate(tokens)?;
        let n = self.trie.node(node);
        if !n.is_leaf() || tokens.last() != Some(&self.vocab.eos_id()) {
            return None;
        }
        n.items().first().copied()
    }

    pub fn raw_items(&self) -> Vec<RawItem> {
        self.items
            .iter()
            .map(|it| RawItem {
                item_id: it.id.clone(),
                title: it.title.clone(),
            })
            .collect()
    }
}

/// Reads line-delimited JSON item records, skipping blank lines.
pub fn read_items(path: &Path) -> Result<Vec<RawItem>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawItem = serde_json::from_str(&line).map_err(|e| {
            Error::format(format!("{}:{}", path.display(), n + 1), e.to_string())
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(pairs: &[(&str, &str)]) -> Vec<RawItem> {
        pairs
            .iter()
            .map(|(id, t)| RawItem {
                item_id: id.to_string(),
                title: t.to_string(),
            })
            .collect()
    }

    #[test]
    fn word_vocabulary_first_seen_order() {
        let v = build_vocabulary(&["Red Ball", "Red Kite"], TokenizerMode::Word).unwrap();
        assert_eq!(v.tokens(), &["red", "ball", "kite", EOS_TOKEN]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.eos_id(), 3);
    }

    #[test]
    fn empty_title_rejected() {
        let err = build_vocabulary(&[""], TokenizerMode::Word).unwrap_err();
        assert!(matches!(err, Error::EmptyTitle { index: 0 }));
        let err = build_vocabulary(&["ok", " -- "], TokenizerMode::Word).unwrap_err();
        assert!(matches!(err, Error::EmptyTitle { index: 1 }));
    }

    #[test]
    fn punctuation_splits_words() {
        assert_eq!(
            split_title("Super-Mario's  Kart!", TokenizerMode::Word),
            vec!["super", "mario", "s", "kart"]
        );
        assert_eq!(split_title(" ab c ", TokenizerMode::Char), vec!["a", "b", " ", "c"]);
    }

    #[test]
    fn sentinel_keeps_sequences_prefix_free() {
        let v = build_vocabulary(&["Red", "Red Ball"], TokenizerMode::Word).unwrap();
        let a = v.encode("Red").unwrap();
        let b = v.encode("Red Ball").unwrap();
        assert_eq!(a, vec![0, 2]);
        assert_eq!(b, vec![0, 1, 2]);
        assert!(!b.starts_with(&a));
    }

    #[test]
    fn unknown_token_reported() {
        let v = build_vocabulary(&["Red Ball"], TokenizerMode::Word).unwrap();
        let err = v.encode("Blue Ball").unwrap_err();
        assert!(matches!(err, Error::UnknownToken { ref token } if token == "blue"));
        // The sentinel string cannot be smuggled in through a title.
        assert!(matches!(v.encode("<eos>"), Err(Error::UnknownToken { .. })));
    }

    #[test]
    fn trie_candidate_sets() {
        let items = vec![
            ItemTokenization { item: ItemIdx(0), tokens: vec![0, 9] },
            ItemTokenization { item: ItemIdx(1), tokens: vec![0, 1, 9] },
        ];
        let trie = build_trie(&items);
        assert_eq!(trie.candidate_set(&[]), &[ItemIdx(0), ItemIdx(1)]);
        assert_eq!(trie.candidate_set(&[0]), &[ItemIdx(0), ItemIdx(1)]);
        assert_eq!(trie.candidate_set(&[0, 1]), &[ItemIdx(1)]);
        assert_eq!(trie.candidate_set(&[5]), &[] as &[ItemIdx]);
        assert_eq!(trie.max_depth(), 3);
    }

    #[test]
    fn catalog_orders_by_id_and_resolves_duplicates() {
        let cat = Catalog::from_raw(
            raw(&[("b", "Red Ball"), ("a", "Red Ball"), ("c", "Kite"), ("d", "?!")]),
            TokenizerMode::Word,
        )
        .unwrap();
        assert_eq!(cat.len(), 3);
        assert_eq!(cat.item(ItemIdx(0)).id, "a");
        assert_eq!(cat.tokens(ItemIdx(0)), cat.tokens(ItemIdx(1)));
        let seq = cat.tokens(ItemIdx(1)).to_vec();
        assert_eq!(cat.resolve(&seq), Some(ItemIdx(0)));
        assert_eq!(cat.resolve(&seq[..1]), None);
        assert_eq!(cat.lookup("c"), Some(ItemIdx(2)));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = Catalog::from_raw(raw(&[("a", "x"), ("a", "y")]), TokenizerMode::Word);
        assert!(err.is_err());
    }

    #[test]
    fn debug_dump_lists_every_node() {
        let cat = Catalog::from_raw(raw(&[("a", "x y"), ("b", "x")]), TokenizerMode::Word).unwrap();
        let dump = cat.trie().debug_dump(cat.vocab());
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), cat.trie().len());
        assert_eq!(lines[0], "\t2");
        assert!(lines.contains(&"x y <eos>\t1"));
    }
}
