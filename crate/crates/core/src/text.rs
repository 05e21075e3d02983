//! Rule-based text and semantic graphs.
//!
//! Tokens are tagged from a lexicon and chunked into entity phrases
//! `determiner? modifier* head`. A relation word between two phrases yields a
//! triple joining the phrase heads; a chain `A rel B rel C` attaches the
//! second relation to `B`. Graph nodes are tokens, so node `i` is sequence
//! position `i`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub relations: BTreeSet<String>,
    pub modifiers: BTreeSet<String>,
    pub determiners: BTreeSet<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("shipped lexicon parses")
    }
}

impl Lexicon {
    pub fn from_json(s: &str) -> Result<Self> {
        let mut lex: Lexicon = serde_json::from_str(s)?;
        for set in [&mut lex.relations, &mut lex.modifiers, &mut lex.determiners] {
            *set = set.iter().map(|w| w.to_lowercase()).collect();
        }
        Ok(lex)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn kind_of(&self, word: &str) -> TokenKind {
        if self.relations.contains(word) {
            TokenKind::Relation
        } else if self.modifiers.contains(word) {
            TokenKind::Modifier
        } else if self.determiners.contains(word) {
            TokenKind::Determiner
        } else if word.chars().any(char::is_alphabetic) {
            TokenKind::Entity
        } else if word.chars().all(|c| c.is_ascii_punctuation()) {
            TokenKind::Punctuation
        } else {
            TokenKind::Other
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    /// Word outside the lexicon.
    Entity,
    Relation,
    Modifier,
    Determiner,
    /// Token without letters, e.g. a number; acts as an entity head.
    Other,
    /// Stand-alone punctuation; a phrase boundary, never a head.
    Punctuation,
}

impl TokenKind {
    fn is_head(self) -> bool {
        matches!(self, TokenKind::Entity | TokenKind::Other)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub index: usize,
    pub kind: TokenKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub subject: usize,
    pub relation: String,
    pub object: usize,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '\'' || c == '_'
}

/// Lowercases and splits on whitespace; punctuation characters become
/// single-character tokens. Words absent from the lexicon are tagged `Entity`.
pub fn tokenize(input: &str, lexicon: &Lexicon) -> Vec<Token> {
    let mut words: Vec<String> = Vec::new();
    let mut cur = String::new();
    for c in input.chars() {
        if is_word_char(c) {
            cur.extend(c.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            words.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
        .into_iter()
        .enumerate()
        .map(|(index, surface)| Token {
            kind: lexicon.kind_of(&surface),
            surface,
            index,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Item {
    Phrase { modifiers: Vec<usize>, head: usize },
    /// Modifiers with no head before the next boundary.
    Dangling { modifiers: Vec<usize> },
    Relation(usize),
    Boundary,
}

fn chunk(tokens: &[Token]) -> Vec<Item> {
    let mut items = Vec::new();
    let mut mods: Vec<usize> = Vec::new();
    let mut open = false;
    let flush = |items: &mut Vec<Item>, mods: &mut Vec<usize>, open: &mut bool| {
        if *open && !mods.is_empty() {
            items.push(Item::Dangling {
                modifiers: std::mem::take(mods),
            });
        }
        mods.clear();
        *open = false;
    };
    for t in tokens {
        match t.kind {
            TokenKind::Determiner => {
                flush(&mut items, &mut mods, &mut open);
                open = true;
            }
            TokenKind::Modifier => {
                open = true;
                mods.push(t.index);
            }
            k if k.is_head() => {
                items.push(Item::Phrase {
                    modifiers: std::mem::take(&mut mods),
                    head: t.index,
                });
                open = false;
            }
            TokenKind::Relation => {
                flush(&mut items, &mut mods, &mut open);
                items.push(Item::Relation(t.index));
            }
            _ => {
                flush(&mut items, &mut mods, &mut open);
                items.push(Item::Boundary);
            }
        }
    }
    flush(&mut items, &mut mods, &mut open);
    items
}

/// A relation token together with what it joined.
#[derive(Debug)]
struct Link {
    relation: usize,
    subject: usize,
    object: Object,
}

#[derive(Debug)]
enum Object {
    Head(usize),
    /// Predicate modifiers (`color is red`).
    Modifiers(Vec<usize>),
}

fn link(tokens: &[Token]) -> (Vec<Item>, Vec<Link>) {
    let items = chunk(tokens);
    let mut links = Vec::new();
    let mut subject: Option<usize> = None;
    let mut i = 0;
    while i < items.len() {
        match &items[i] {
            Item::Phrase { head, .. } => subject = Some(*head),
            Item::Boundary => subject = None,
            Item::Dangling { .. } => {}
            Item::Relation(r) => {
                // Unmatched relations are skipped and keep the pending subject.
                if let Some(s) = subject {
                    match items.get(i + 1) {
                        Some(Item::Phrase { head, .. }) => {
                            links.push(Link {
                                relation: *r,
                                subject: s,
                                object: Object::Head(*head),
                            });
                            subject = Some(*head);
                            i += 2;
                            continue;
                        }
                        Some(Item::Dangling { modifiers }) => {
                            links.push(Link {
                                relation: *r,
                                subject: s,
                                object: Object::Modifiers(modifiers.clone()),
                            });
                            i += 2;
                            continue;
                        }
                        _ => {}
                    }
                }
            }
        }
        i += 1;
    }
    (items, links)
}

/// Extracts entity–relation–entity triples.
pub fn parse_triples(tokens: &[Token]) -> Vec<Triple> {
    let (_, links) = link(tokens);
    links
        .into_iter()
        .filter_map(|l| match l.object {
            Object::Head(o) if o != l.subject => Some(Triple {
                subject: l.subject,
                relation: tokens[l.relation].surface.clone(),
                object: o,
            }),
            _ => None,
        })
        .collect()
}

/// Undirected graph over all tokens: triple edges labeled by relation,
/// modifier–head edges, and relation-token links to both endpoints.
/// Predicate modifiers attach to the subject of their relation.
pub fn build_text_graph(tokens: &[Token], triples: &[Triple]) -> Result<Graph> {
    let n = tokens.len();
    let mut g = Graph::new(n, false);
    g.set_node_labels(tokens.iter().map(|t| t.surface.clone()).collect())?;
    for t in triples {
        g.add_edge(t.subject, t.object, Some(&t.relation))?;
    }
    let (items, links) = link(tokens);
    for item in &items {
        if let Item::Phrase { modifiers, head } = item {
            for &m in modifiers {
                g.add_edge(m, *head, None)?;
            }
        }
    }
    for l in &links {
        match &l.object {
            Object::Head(o) => {
                if triples
                    .iter()
                    .any(|t| t.subject == l.subject && t.object == *o && t.relation == tokens[l.relation].surface)
                {
                    g.add_edge(l.relation, l.subject, None)?;
                    g.add_edge(l.relation, *o, None)?;
                }
            }
            Object::Modifiers(mods) => {
                g.add_edge(l.relation, l.subject, None)?;
                for &m in mods {
                    g.add_edge(m, l.subject, None)?;
                }
                if let Some(&last) = mods.last() {
                    g.add_edge(l.relation, last, None)?;
                }
            }
        }
    }
    Ok(g)
}

/// Text graph for a question.
pub fn text_graph(question: &str, lexicon: &Lexicon) -> Result<(Vec<Token>, Graph)> {
    let tokens = tokenize(question, lexicon);
    let triples = parse_triples(&tokens);
    let g = build_text_graph(&tokens, &triples)?;
    Ok((tokens, g))
}

/// Semantic graph for declarative text; same grammar as questions.
pub fn semantic_graph(text: &str, lexicon: &Lexicon) -> Result<(Vec<Token>, Graph)> {
    text_graph(text, lexicon)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// `"<header> is <cell> ;"` for every cell, rows in order.
pub fn linearize_table(table: &Table) -> Result<String> {
    let width = table.headers.len();
    let mut parts = Vec::new();
    for (r, row) in table.rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::Shape {
                row: r,
                got: row.len(),
                expected: width,
            });
        }
        for (h, cell) in table.headers.iter().zip(row) {
            parts.push(format!("{h} is {cell} ;"));
        }
    }
    Ok(parts.join(" "))
}

pub fn table_graph(table: &Table, lexicon: &Lexicon) -> Result<(Vec<Token>, Graph)> {
    semantic_graph(&linearize_table(table)?, lexicon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> Lexicon {
        Lexicon::default()
    }

    fn kinds(s: &str) -> Vec<TokenKind> {
        tokenize(s, &lex()).into_iter().map(|t| t.kind).collect()
    }

    fn triples(s: &str) -> Vec<(String, String, String)> {
        let toks = tokenize(s, &lex());
        parse_triples(&toks)
            .into_iter()
            .map(|t| {
                (
                    toks[t.subject].surface.clone(),
                    t.relation,
                    toks[t.object].surface.clone(),
                )
            })
            .collect()
    }

    fn edge_set(g: &Graph) -> Vec<(usize, usize, Option<String>)> {
        let mut e: Vec<_> = g.edges().iter().map(|e| (e.src, e.dst, e.label.clone())).collect();
        e.sort();
        e
    }

    #[test]
    fn shipped_lexicon_size() {
        let l = lex();
        assert_eq!(l.relations.len(), 40);
        assert!(l.relations.contains("left-of") && l.relations.contains("is"));
    }

    #[test]
    fn tokenize_examples() {
        use TokenKind::*;
        assert_eq!(kinds("sandwich on plate"), vec![Entity, Relation, Entity]);
        assert!(kinds("").is_empty());
        assert_eq!(kinds("the red cube"), vec![Determiner, Modifier, Entity]);
        assert_eq!(kinds("3 , x"), vec![Other, Punctuation, Entity]);
    }

    #[test]
    fn tokenize_lowercases_and_splits_punctuation() {
        let t = tokenize("Is the Cube LEFT-OF the sphere?", &lex());
        let s: Vec<_> = t.iter().map(|t| t.surface.as_str()).collect();
        assert_eq!(s, ["is", "the", "cube", "left-of", "the", "sphere", "?"]);
        assert_eq!(t[6].kind, TokenKind::Punctuation);
        assert!(t.iter().enumerate().all(|(i, t)| t.index == i));
    }

    #[test]
    fn parse_examples() {
        let s = |a: &str, b: &str, c: &str| (a.to_string(), b.to_string(), c.to_string());
        assert_eq!(triples("sandwich on plate"), vec![s("sandwich", "on", "plate")]);
        assert!(triples("a dog").is_empty());
        assert_eq!(
            triples("red cube left-of blue sphere on table"),
            vec![s("cube", "left-of", "sphere"), s("sphere", "on", "table")]
        );
    }

    #[test]
    fn unmatched_relations_are_skipped() {
        let s = |a: &str, b: &str, c: &str| (a.to_string(), b.to_string(), c.to_string());
        assert!(triples("on on").is_empty());
        assert_eq!(triples("dog on on table"), vec![s("dog", "on", "table")]);
        assert!(triples("dog on , table").is_empty());
    }

    #[test]
    fn text_graph_examples() {
        let (_, g) = text_graph("sandwich on plate", &lex()).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(
            edge_set(&g),
            vec![(0, 1, None), (0, 2, Some("on".into())), (1, 2, None)]
        );
        let (_, g) = text_graph("", &lex()).unwrap();
        assert_eq!(g.num_nodes(), 0);
        assert!(g.edges().is_empty());
        let (_, g) = text_graph("red cube", &lex()).unwrap();
        assert_eq!(edge_set(&g), vec![(0, 1, None)]);
    }

    #[test]
    fn question_graph() {
        let (toks, g) = text_graph("color of cube left-of sphere", &lex()).unwrap();
        assert_eq!(toks.len(), 5);
        assert_eq!(
            edge_set(&g),
            vec![
                (0, 1, None),
                (0, 2, Some("of".into())),
                (1, 2, None),
                (2, 3, None),
                (2, 4, Some("left-of".into())),
                (3, 4, None),
            ]
        );
    }

    #[test]
    fn linearize_examples() {
        let t = Table {
            headers: vec!["name".into(), "color".into()],
            rows: vec![vec!["cube".into(), "red".into()]],
        };
        assert_eq!(linearize_table(&t).unwrap(), "name is cube ; color is red ;");
        let empty = Table {
            headers: vec![],
            rows: vec![],
        };
        assert_eq!(linearize_table(&empty).unwrap(), "");
        let two = Table {
            headers: vec!["name".into()],
            rows: vec![vec!["cube".into()], vec!["sphere".into()]],
        };
        assert_eq!(linearize_table(&two).unwrap(), "name is cube ; name is sphere ;");
    }

    #[test]
    fn ragged_table_is_shape_error() {
        let t = Table {
            headers: vec!["a".into(), "b".into()],
            rows: vec![vec!["x".into()]],
        };
        assert!(matches!(linearize_table(&t), Err(Error::Shape { row: 0, got: 1, expected: 2 })));
    }

    #[test]
    fn table_graph_links_predicate_modifiers() {
        let t = Table {
            headers: vec!["name".into(), "color".into()],
            rows: vec![vec!["cube".into(), "red".into()]],
        };
        let (toks, g) = table_graph(&t, &lex()).unwrap();
        // name is cube ; color is red ;
        assert_eq!(toks.len(), 8);
        let trip = parse_triples(&toks);
        assert_eq!(trip.len(), 1);
        assert_eq!((trip[0].subject, trip[0].object), (0, 2));
        assert!(g.has_edge(6, 4), "red attaches to color");
        assert!(g.has_edge(5, 4) && g.has_edge(5, 6));
        assert!(!g.has_edge(2, 4), "rows separated by ';'");
    }
}
