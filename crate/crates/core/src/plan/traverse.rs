use super::{PlanNode, PlanTree, NULL_NODE, PASS_THROUGH};

/// Arena view of a plan. Node ids are pre-order positions (root = 0).
#[derive(Debug)]
pub struct FlatTree<'a> {
    pub nodes: Vec<&'a PlanNode>,
    pub parent: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
}

impl<'a> FlatTree<'a> {
    pub fn new(root: &'a PlanNode) -> Self {
        let mut flat = FlatTree {
            nodes: Vec::new(),
            parent: Vec::new(),
            children: Vec::new(),
        };
        flat.visit(root, None);
        flat
    }

    fn visit(&mut self, node: &'a PlanNode, parent: Option<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.parent.push(parent);
        self.children.push(Vec::new());
        for child in &node.children {
            let cid = self.visit(child, Some(id));
            self.children[id].push(cid);
        }
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Children left to right before their parent; root last.
    pub fn postorder(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        // Iterative so deep chains cannot overflow the stack.
        let mut stack = vec![(0usize, 0usize)];
        while let Some((node, next)) = stack.pop() {
            if next < self.children[node].len() {
                stack.push((node, next + 1));
                stack.push((self.children[node][next], 0));
            } else {
                order.push(node);
            }
        }
        order
    }

    pub fn edge_lists(&self) -> EdgeLists {
        let mut child_to_parent = Vec::with_capacity(self.len().saturating_sub(1));
        for (parent, kids) in self.children.iter().enumerate() {
            for &c in kids {
                child_to_parent.push((c, parent));
            }
        }
        let parent_to_child = child_to_parent.iter().map(|&(c, p)| (p, c)).collect();
        EdgeLists {
            child_to_parent,
            parent_to_child,
        }
    }
}

/// Directed edges `(src, dst)` in both orientations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeLists {
    pub child_to_parent: Vec<(usize, usize)>,
    pub parent_to_child: Vec<(usize, usize)>,
}

pub fn postorder(tree: &PlanTree) -> Vec<usize> {
    FlatTree::new(&tree.root).postorder()
}

pub fn edge_lists(tree: &PlanTree) -> EdgeLists {
    FlatTree::new(&tree.root).edge_lists()
}

fn binarize_node(node: &PlanNode) -> PlanNode {
    let mut kids: Vec<PlanNode> = node.children.iter().map(binarize_node).collect();
    let children = match kids.len() {
        0 => Vec::new(),
        1 => vec![kids.pop().unwrap(), PlanNode::new(NULL_NODE)],
        2 => kids,
        _ => {
            let last = kids.pop().unwrap();
            let mut iter = kids.into_iter();
            let first = iter.next().unwrap();
            let left = iter.fold(first, |acc, next| {
                PlanNode::new(PASS_THROUGH).with_children(vec![acc, next])
            });
            vec![left, last]
        }
    };
    PlanNode {
        node_type: node.node_type.clone(),
        tables: node.tables.clone(),
        predicates: node.predicates.clone(),
        children,
    }
}

/// Rewrites the tree so every internal node has exactly two children.
/// Unary nodes get a `⊥` right child; nodes with `k > 2` children keep the
/// last child on the right and fold the others into a left-deep chain of
/// pass-through nodes.
pub fn binarize(tree: &PlanTree) -> PlanTree {
    PlanTree {
        query_id: tree.query_id.clone(),
        plan_id: tree.plan_id.clone(),
        latency_ms: tree.latency_ms,
        root: binarize_node(&tree.root),
    }
}
