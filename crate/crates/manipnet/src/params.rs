//! Parameter packs: structured collections of tensors that can be bound onto
//! a tape as leaves, enumerated by name for checkpoints, updated in place,
//! and rebuilt node-wise (how the trainer forms the lookahead parameters
//! theta' = theta - alpha * grad without losing the graph structure).

use std::collections::HashMap;

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub trait Pack {
    type Nodes: Clone;

    fn bind(&self, tape: &mut Tape) -> Self::Nodes;
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));
    fn visit_names(&self, prefix: &str, f: &mut dyn FnMut(String));
    fn collect_nodes(nodes: &Self::Nodes, out: &mut Vec<NodeId>);
    fn map_nodes(nodes: &Self::Nodes, f: &mut dyn FnMut(NodeId) -> NodeId) -> Self::Nodes;
}

impl Pack for Tensor {
    type Nodes = NodeId;

    fn bind(&self, tape: &mut Tape) -> NodeId {
        tape.leaf(self.clone())
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(self)
    }

    fn visit_names(&self, prefix: &str, f: &mut dyn FnMut(String)) {
        f(prefix.to_string())
    }

    fn collect_nodes(nodes: &NodeId, out: &mut Vec<NodeId>) {
        out.push(*nodes)
    }

    fn map_nodes(nodes: &NodeId, f: &mut dyn FnMut(NodeId) -> NodeId) -> NodeId {
        f(*nodes)
    }
}

impl<T: Pack> Pack for Vec<T> {
    type Nodes = Vec<T::Nodes>;

    fn bind(&self, tape: &mut Tape) -> Self::Nodes {
        self.iter().map(|p| p.bind(tape)).collect()
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        for p in self {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for p in self {
            p.visit_mut(f);
        }
    }

    fn visit_names(&self, prefix: &str, f: &mut dyn FnMut(String)) {
        for (i, p) in self.iter().enumerate() {
            p.visit_names(&format!("{}.{}", prefix, i), f);
        }
    }

    fn collect_nodes(nodes: &Self::Nodes, out: &mut Vec<NodeId>) {
        for n in nodes {
            T::collect_nodes(n, out);
        }
    }

    fn map_nodes(nodes: &Self::Nodes, f: &mut dyn FnMut(NodeId) -> NodeId) -> Self::Nodes {
        nodes.iter().map(|n| T::map_nodes(n, f)).collect()
    }
}

/// Define a parameter struct together with its bound-node mirror and the
/// mechanical Pack plumbing.
#[macro_export]
macro_rules! param_pack {
    ($(#[$meta:meta])* pub struct $P:ident / $N:ident { $(pub $f:ident : $t:ty),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone)]
        pub struct $P {
            $(pub $f: $t),+
        }

        #[derive(Clone)]
        pub struct $N {
            $(pub $f: <$t as $crate::params::Pack>::Nodes),+
        }

        impl $crate::params::Pack for $P {
            type Nodes = $N;

            fn bind(&self, tape: &mut $crate::tape::Tape) -> $N {
                $N { $($f: self.$f.bind(tape)),+ }
            }

            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a $crate::tensor::Tensor)) {
                $(self.$f.visit(f);)+
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut $crate::tensor::Tensor)) {
                $(self.$f.visit_mut(f);)+
            }

            fn visit_names(&self, prefix: &str, f: &mut dyn FnMut(String)) {
                $(self.$f.visit_names(&format!("{}.{}", prefix, stringify!($f)), f);)+
            }

            fn collect_nodes(nodes: &$N, out: &mut Vec<$crate::tape::NodeId>) {
                $(<$t as $crate::params::Pack>::collect_nodes(&nodes.$f, out);)+
            }

            fn map_nodes(nodes: &$N, f: &mut dyn FnMut($crate::tape::NodeId) -> $crate::tape::NodeId) -> $N {
                $N { $($f: <$t as $crate::params::Pack>::map_nodes(&nodes.$f, f)),+ }
            }
        }
    };
}

/// Named tensors in visit order, for checkpoints and coordinate enumeration.
pub fn named_tensors<P: Pack>(pack: &P, prefix: &str) -> Vec<(String, Tensor)> {
    let mut names = Vec::new();
    pack.visit_names(prefix, &mut |n| names.push(n));
    let mut tensors = Vec::new();
    pack.visit(&mut |t| tensors.push(t.clone()));
    assert_eq!(names.len(), tensors.len());
    names.into_iter().zip(tensors).collect()
}

pub fn leaf_nodes<P: Pack>(nodes: &P::Nodes) -> Vec<NodeId> {
    let mut out = Vec::new();
    P::collect_nodes(nodes, &mut out);
    out
}

pub fn parameter_count<P: Pack>(pack: &P) -> usize {
    let mut n = 0;
    pack.visit(&mut |t| n += t.len());
    n
}

/// In-place SGD step; gradient order must match visit order (None = no flow).
pub fn sgd_step<P: Pack>(pack: &mut P, grads: &[Option<Tensor>], lr: f64, clip: Option<f64>) {
    let scale = match clip {
        Some(c) if c > 0.0 => {
            let mut sq = 0.0;
            for g in grads.iter().flatten() {
                sq += g.data.iter().map(|v| v * v).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        _ => 1.0,
    };
    let mut i = 0;
    pack.visit_mut(&mut |t| {
        if let Some(g) = &grads[i] {
            assert_eq!(t.shape(), g.shape(), "gradient shape mismatch at index {}", i);
            for (p, gv) in t.data.iter_mut().zip(&g.data) {
                *p -= lr * scale * gv;
            }
        }
        i += 1;
    });
}

/// Lookahead parameters: for every leaf with a gradient node, substitute
/// leaf - alpha * grad; leaves without flow stay as-is.
pub fn lookahead<P: Pack>(
    tape: &mut Tape,
    nodes: &P::Nodes,
    grads: &HashMap<usize, NodeId>,
    alpha: f64,
) -> P::Nodes {
    P::map_nodes(nodes, &mut |id| match grads.get(&id.0) {
        Some(&g) => {
            let step = tape.scale(g, alpha);
            tape.sub(id, step)
        }
        None => id,
    })
}

/// Gradient nodes of `loss` keyed by leaf id, for feeding `lookahead`.
pub fn grad_map<P: Pack>(
    tape: &mut Tape,
    loss: NodeId,
    nodes: &P::Nodes,
    create_graph: bool,
) -> HashMap<usize, NodeId> {
    let leaves = leaf_nodes::<P>(nodes);
    let grads = tape.grad(loss, &leaves, create_graph);
    leaves
        .iter()
        .zip(grads)
        .filter_map(|(l, g)| g.map(|g| (l.0, g)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    param_pack! {
        pub struct Demo / DemoN {
            pub w: Tensor,
            pub layers: Vec<Tensor>,
        }
    }

    #[test]
    fn names_follow_structure() {
        let d = Demo { w: Tensor::zeros(2, 2), layers: vec![Tensor::zeros(1, 3), Tensor::zeros(1, 3)] };
        let names: Vec<String> = named_tensors(&d, "demo").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["demo.w", "demo.layers.0", "demo.layers.1"]);
        assert_eq!(parameter_count(&d), 10);
    }

    #[test]
    fn sgd_updates_in_visit_order() {
        let mut d = Demo { w: Tensor::filled(1, 2, 1.0), layers: vec![Tensor::filled(1, 1, 2.0)] };
        let grads = vec![Some(Tensor::filled(1, 2, 0.5)), None];
        sgd_step(&mut d, &grads, 0.1, None);
        assert!((d.w.data[0] - 0.95).abs() < 1e-12);
        assert!((d.layers[0].data[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lookahead_substitutes_only_flowing_leaves() {
        let d = Demo { w: Tensor::filled(1, 1, 3.0), layers: vec![Tensor::filled(1, 1, 4.0)] };
        let mut tape = Tape::new();
        let nodes = d.bind(&mut tape);
        // Loss touches only w.
        let loss = tape.mul(nodes.w, nodes.w);
        let grads = grad_map::<Demo>(&mut tape, loss, &nodes, true);
        let ahead = lookahead::<Demo>(&mut tape, &nodes, &grads, 0.5);
        // w' = 3 - 0.5 * 6 = 0; untouched layer keeps its leaf.
        assert!((tape.value(ahead.w).data[0]).abs() < 1e-12);
        assert_eq!(ahead.layers[0], nodes.layers[0]);
    }
}
