use std::rc::Rc;

use ndarray::Array2;

use super::Aggregation;

/// Disjoint union of molecular graphs stacked row-wise.
///
/// Node rows of graph `g` occupy `offsets[g]..offsets[g] + sizes[g]`. Edges
/// are directed `(recv[k], send[k])` pairs between distinct atoms of the same
/// graph; messages flow from sender to receiver.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    pub node_graph: Rc<[usize]>,
    pub graph_weight: Rc<[f64]>,
    pub recv: Rc<[usize]>,
    pub send: Rc<[usize]>,
    /// Per-node aggregation weight (1 for sum, 1/in-degree for mean).
    pub agg_weight: Rc<[f64]>,
    /// Per-node 1/in-degree, used for averaging frame projections.
    pub mean_weight: Rc<[f64]>,
}

impl GraphBatch {
    /// Fully connected graphs, or pairs closer than `cutoff` Å when set.
    pub fn build(sizes: &[usize], coords: &Array2<f64>, cutoff: Option<f64>, aggregation: Aggregation) -> Self {
        let n: usize = sizes.iter().sum();
        assert_eq!(coords.nrows(), n, "coordinate rows must match graph sizes");
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut node_graph = Vec::with_capacity(n);
        let mut recv = Vec::new();
        let mut send = Vec::new();
        let mut start = 0;
        for (g, &size) in sizes.iter().enumerate() {
            offsets.push(start);
            node_graph.extend(std::iter::repeat_n(g, size));
            for i in start..start + size {
                for j in start..start + size {
                    if i == j {
                        continue;
                    }
                    if let Some(c) = cutoff {
                        let d2: f64 = (0..3).map(|k| (coords[[i, k]] - coords[[j, k]]).powi(2)).sum();
                        if d2 >= c * c {
                            continue;
                        }
                    }
                    recv.push(i);
                    send.push(j);
                }
            }
            start += size;
        }
        let mut degree = vec![0usize; n];
        for &i in &recv {
            degree[i] += 1;
        }
        let mean_weight: Vec<f64> = degree.iter().map(|&d| if d == 0 { 0.0 } else { 1.0 / d as f64 }).collect();
        let agg_weight = match aggregation {
            Aggregation::Mean => mean_weight.clone(),
            Aggregation::Sum => vec![1.0; n],
        };
        GraphBatch {
            sizes: sizes.to_vec(),
            offsets,
            node_graph: node_graph.into(),
            graph_weight: sizes.iter().map(|&s| 1.0 / s as f64).collect::<Vec<_>>().into(),
            recv: recv.into(),
            send: send.into(),
            agg_weight: agg_weight.into(),
            mean_weight: mean_weight.into(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_edges(&self) -> usize {
        self.recv.len()
    }

    pub fn num_graphs(&self) -> usize {
        self.sizes.len()
    }
}
