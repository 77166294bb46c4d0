use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    NetworkManager,
    TrustedNode,
    EdgeNode,
}

impl NodeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nm" | "network_manager" => Some(NodeKind::NetworkManager),
            "tn" | "trusted_node" => Some(NodeKind::TrustedNode),
            "en" | "edge_node" => Some(NodeKind::EdgeNode),
            _ => None,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            NodeKind::NetworkManager => "NM",
            NodeKind::TrustedNode => "TN",
            NodeKind::EdgeNode => "EN",
        }
    }
}

/// Position of a node in the linear chain. Link `n` joins node `n - 1`
/// (its left end) to node `n` (its right end).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRole {
    pub kind: NodeKind,
    pub left_link: Option<u8>,
    pub right_link: Option<u8>,
}

impl NodeRole {
    /// Role of node `k` in a chain of `n_links` links.
    pub fn in_chain(k: usize, n_links: usize) -> Self {
        let kind = if k == 0 {
            NodeKind::NetworkManager
        } else if k == n_links {
            NodeKind::EdgeNode
        } else {
            NodeKind::TrustedNode
        };
        NodeRole {
            kind,
            left_link: (k > 0).then(|| k as u8),
            right_link: (k < n_links).then(|| k as u8 + 1),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match self.kind {
            NodeKind::NetworkManager => self.left_link.is_none() && self.right_link.is_some(),
            NodeKind::TrustedNode => self.left_link.is_some() && self.right_link.is_some(),
            NodeKind::EdgeNode => self.left_link.is_some() && self.right_link.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(format!(
                "{} must have {}",
                self.kind.short(),
                match self.kind {
                    NodeKind::NetworkManager => "a right link and no left link",
                    NodeKind::TrustedNode => "both a left and a right link",
                    NodeKind::EdgeNode => "a left link and no right link",
                }
            ))
        }
    }
}

/// Checks that `roles`, in chain order, form NM, TN..., EN with matching
/// link indices between neighbours. Returns every problem found.
pub fn validate_chain(roles: &[NodeRole]) -> Vec<String> {
    let mut errs = Vec::new();
    if roles.len() < 2 {
        errs.push(format!("need at least 2 nodes, got {}", roles.len()));
        return errs;
    }
    for (k, r) in roles.iter().enumerate() {
        if let Err(e) = r.validate() {
            errs.push(format!("node {k}: {e}"));
        }
    }
    for (k, pair) in roles.windows(2).enumerate() {
        if pair[0].right_link != pair[1].left_link {
            errs.push(format!(
                "node {k} right link {:?} does not match node {} left link {:?}",
                pair[0].right_link,
                k + 1,
                pair[1].left_link
            ));
        }
    }
    if roles[0].kind != NodeKind::NetworkManager {
        errs.push("first node must be the network manager".to_string());
    }
    if roles[roles.len() - 1].kind != NodeKind::EdgeNode {
        errs.push("last node must be the edge node".to_string());
    }
    errs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_node_chain() {
        let roles: Vec<NodeRole> = (0..4).map(|k| NodeRole::in_chain(k, 3)).collect();
        assert!(validate_chain(&roles).is_empty());
        assert_eq!(roles[0].right_link, Some(1));
        assert_eq!(roles[2], NodeRole { kind: NodeKind::TrustedNode, left_link: Some(2), right_link: Some(3) });
        assert_eq!(roles[3].kind, NodeKind::EdgeNode);
    }

    #[test]
    fn mismatched_links_reported() {
        let mut roles: Vec<NodeRole> = (0..4).map(|k| NodeRole::in_chain(k, 3)).collect();
        roles[2].left_link = Some(5);
        roles[3].right_link = Some(4);
        let errs = validate_chain(&roles);
        assert_eq!(errs.len(), 2, "{errs:?}");
    }

    #[test]
    fn role_shape() {
        let bad = NodeRole { kind: NodeKind::NetworkManager, left_link: Some(1), right_link: Some(2) };
        assert!(bad.validate().is_err());
        assert_eq!(NodeKind::parse("TN"), Some(NodeKind::TrustedNode));
        assert_eq!(NodeKind::parse("xx"), None);
    }
}
