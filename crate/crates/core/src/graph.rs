//! Node/edge graphs and their JSON form.

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub label: Option<String>,
}

impl Serialize for Edge {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(if self.label.is_some() { 3 } else { 2 }))?;
        seq.serialize_element(&self.src)?;
        seq.serialize_element(&self.dst)?;
        if let Some(l) = &self.label {
            seq.serialize_element(l)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Edge {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct EdgeVisitor;
        impl<'de> Visitor<'de> for EdgeVisitor {
            type Value = Edge;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("[src, dst] or [src, dst, label]")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Edge, A::Error> {
                let src = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let dst = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let label: Option<Option<String>> = seq.next_element()?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(4, &self));
                }
                Ok(Edge {
                    src,
                    dst,
                    label: label.flatten(),
                })
            }
        }
        d.deserialize_seq(EdgeVisitor)
    }
}

/// A graph over `num_nodes` nodes. Undirected edges are stored once with
/// `src <= dst`; adjacency queries treat them symmetrically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    num_nodes: usize,
    directed: bool,
    edges: Vec<Edge>,
    #[serde(default)]
    node_labels: Vec<String>,
}

impl Graph {
    pub fn new(num_nodes: usize, directed: bool) -> Self {
        Self {
            num_nodes,
            directed,
            edges: Vec::new(),
            node_labels: Vec::new(),
        }
    }

    /// Undirected graph with every pair connected, self-edges included.
    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n, false);
        for i in 0..n {
            for j in i..n {
                g.edges.push(Edge {
                    src: i,
                    dst: j,
                    label: None,
                });
            }
        }
        g
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_labels(&self) -> &[String] {
        &self.node_labels
    }

    pub fn set_node_labels(&mut self, labels: Vec<String>) -> Result<()> {
        if !labels.is_empty() && labels.len() != self.num_nodes {
            return Err(Error::Graph(format!(
                "{} node labels for {} nodes",
                labels.len(),
                self.num_nodes
            )));
        }
        self.node_labels = labels;
        Ok(())
    }

    fn canonical(&self, i: usize, j: usize) -> (usize, usize) {
        if self.directed || i <= j {
            (i, j)
        } else {
            (j, i)
        }
    }

    /// Adds an edge. Returns `false` if an equal edge already existed (the
    /// first label wins).
    pub fn add_edge(&mut self, i: usize, j: usize, label: Option<&str>) -> Result<bool> {
        for e in [i, j] {
            if e >= self.num_nodes {
                return Err(Error::Graph(format!(
                    "edge endpoint {e} outside [0, {})",
                    self.num_nodes
                )));
            }
        }
        let (src, dst) = self.canonical(i, j);
        if self.edges.iter().any(|e| e.src == src && e.dst == dst) {
            return Ok(false);
        }
        self.edges.push(Edge {
            src,
            dst,
            label: label.map(str::to_owned),
        });
        Ok(true)
    }

    /// True iff information may flow along `i → j`.
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        let (src, dst) = self.canonical(i, j);
        self.edges.iter().any(|e| e.src == src && e.dst == dst)
    }

    /// Dense boolean adjacency, row-major `N×N`.
    pub fn adjacency(&self) -> Vec<bool> {
        let n = self.num_nodes;
        let mut adj = vec![false; n * n];
        for e in &self.edges {
            adj[e.src * n + e.dst] = true;
            if !self.directed {
                adj[e.dst * n + e.src] = true;
            }
        }
        adj
    }

    /// Checks endpoint ranges, duplicates and label count; canonicalizes
    /// undirected edge orientation.
    pub fn validate(mut self) -> Result<Self> {
        let edges = std::mem::take(&mut self.edges);
        for e in edges {
            if !self.add_edge(e.src, e.dst, e.label.as_deref())? {
                return Err(Error::Graph(format!("duplicate edge ({}, {})", e.src, e.dst)));
            }
        }
        let labels = std::mem::take(&mut self.node_labels);
        self.set_node_labels(labels)?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let g: Graph = serde_json::from_str(s)?;
        g.validate()
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_json(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_endpoint() {
        let mut g = Graph::new(2, false);
        assert!(g.add_edge(0, 2, None).is_err());
    }

    #[test]
    fn undirected_edges_deduplicate_across_orientation() {
        let mut g = Graph::new(3, false);
        assert!(g.add_edge(2, 1, Some("on")).unwrap());
        assert!(!g.add_edge(1, 2, None).unwrap());
        assert_eq!(g.edges().len(), 1);
        assert!(g.has_edge(1, 2) && g.has_edge(2, 1));
    }

    #[test]
    fn directed_edges_keep_orientation() {
        let mut g = Graph::new(2, true);
        g.add_edge(1, 0, None).unwrap();
        assert!(g.has_edge(1, 0));
        assert!(!g.has_edge(0, 1));
    }

    #[test]
    fn json_shape() {
        let mut g = Graph::new(3, false);
        g.add_edge(0, 2, Some("on")).unwrap();
        g.add_edge(1, 0, None).unwrap();
        g.set_node_labels(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(
            g.to_json(),
            r#"{"num_nodes":3,"directed":false,"edges":[[0,2,"on"],[0,1]],"node_labels":["a","b","c"]}"#
        );
        assert_eq!(Graph::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn json_duplicates_and_bad_endpoints_rejected() {
        let dup = r#"{"num_nodes":2,"directed":false,"edges":[[0,1],[1,0]]}"#;
        assert!(Graph::from_json(dup).is_err());
        let bad = r#"{"num_nodes":2,"directed":false,"edges":[[0,5]]}"#;
        assert!(Graph::from_json(bad).is_err());
        let null_label = r#"{"num_nodes":2,"directed":true,"edges":[[0,1,null]]}"#;
        assert_eq!(Graph::from_json(null_label).unwrap().edges()[0].label, None);
    }
}
