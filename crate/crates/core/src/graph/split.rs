use serde::{Deserialize, Serialize};

use super::Graph;
use crate::numkit::Rng;
use crate::{Error, Result};

pub const TRAIN_PER_CLASS: usize = 20;
pub const VAL_SIZE: usize = 500;

/// Disjoint train/validation/test node lists, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub seed: u64,
}

/// 20 labelled nodes per class, 500 validation nodes, the rest for test.
pub fn make_split(g: &Graph, seed: u64) -> Result<DataSplit> {
    make_split_with(g, seed, TRAIN_PER_CLASS, VAL_SIZE)
}

/// Class `c` draws its training nodes from stream `c` of the seed; the
/// validation draw uses the stream after the last class.
pub fn make_split_with(g: &Graph, seed: u64, per_class: usize, val_size: usize) -> Result<DataSplit> {
    let n = g.num_nodes();
    let c = g.num_classes();
    let mut by_class = vec![Vec::new(); c];
    for (i, &l) in g.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some((k, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < per_class) {
        return Err(Error::Data(format!(
            "class {k} has {} nodes, fewer than the {per_class} needed for training",
            members.len()
        )));
    }
    if n <= per_class * c + val_size {
        return Err(Error::Data(format!(
            "{n} nodes leave no test set after {} training and {val_size} validation nodes",
            per_class * c
        )));
    }
    let root = Rng::new(seed);
    let mut in_train = vec![false; n];
    let mut train_idx = Vec::with_capacity(per_class * c);
    for (k, members) in by_class.iter().enumerate() {
        let mut rng = root.split(k as u64);
        for pick in rng.sample_indices(members.len(), per_class) {
            in_train[members[pick]] = true;
            train_idx.push(members[pick]);
        }
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    let mut rng = root.split(c as u64);
    let mut in_val = vec![false; n];
    for pick in rng.sample_indices(rest.len(), val_size) {
        in_val[rest[pick]] = true;
    }
    let val_idx = rest.iter().copied().filter(|&i| in_val[i]).collect();
    let test_idx = rest.into_iter().filter(|&i| !in_val[i]).collect();
    train_idx.sort_unstable();
    Ok(DataSplit {
        train_idx,
        val_idx,
        test_idx,
        seed,
    })
}
