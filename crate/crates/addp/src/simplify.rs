//! Test-time inference simplification: transfer each test clip's shallow
//! feature to the style prototype with the lowest recorded training MAE.

use crate::error::Result;
use crate::nn::tensor::Tensor;
use crate::proto::{PrototypeStore, StylePrototype};

/// Among prototypes with at least one MAE record, return the index of the
/// one with the lowest mean MAE. Ties break to the latest task, then the
/// lowest cluster id. Returns `None` when no prototype is eligible
/// (simplification silently disabled).
pub fn select_best_prototype(store: &PrototypeStore) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in store.styles().iter().enumerate() {
        if p.mae_count == 0 {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let q = &store.styles()[j];
                let better = p.mae_mean < q.mae_mean
                    || (p.mae_mean == q.mae_mean
                        && (p.task_id > q.task_id
                            || (p.task_id == q.task_id && p.cluster_id < q.cluster_id)));
                if better {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

/// Style-transfer a test clip's shallow feature to the selected prototype.
/// Identical computation to the training-time AdaIN augmentation (shared
/// implementation); no noise transfer happens at inference.
pub fn simplify(h: &Tensor, proto: &StylePrototype) -> Result<Tensor> {
    crate::augment::adain(h, proto)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proto::StylePrototype;

    fn proto(task: usize, cluster: usize, mae: f64, count: usize) -> StylePrototype {
        StylePrototype {
            mu: vec![0.0],
            sigma: vec![1.0],
            task_id: task,
            cluster_id: cluster,
            mae_mean: mae,
            mae_count: count,
        }
    }

    #[test]
    fn selects_lowest_mae() {
        let mut store = PrototypeStore::new();
        store.push_task(
            vec![proto(0, 0, 4.0, 3), proto(0, 1, 2.5, 2), proto(0, 2, 3.1, 5)],
            vec![],
        );
        assert_eq!(select_best_prototype(&store), Some(1));
    }

    #[test]
    fn empty_store_selects_none() {
        let store = PrototypeStore::new();
        assert_eq!(select_best_prototype(&store), None);
    }

    #[test]
    fn unrecorded_prototypes_ineligible() {
        let mut store = PrototypeStore::new();
        store.push_task(vec![proto(0, 0, 0.0, 0), proto(0, 1, 9.0, 1)], vec![]);
        assert_eq!(select_best_prototype(&store), Some(1));
    }

    #[test]
    fn tie_breaks_to_latest_task_then_lowest_cluster() {
        let mut store = PrototypeStore::new();
        store.push_task(vec![proto(1, 0, 2.5, 1)], vec![]);
        store.push_task(vec![proto(3, 1, 2.5, 1), proto(3, 0, 2.5, 1)], vec![]);
        // prototypes: [task1/c0, task3/c1, task3/c0] all at 2.5
        assert_eq!(select_best_prototype(&store), Some(2), "task 3, cluster 0");
    }

    #[test]
    fn selection_deterministic() {
        let mut store = PrototypeStore::new();
        store.push_task(
            vec![proto(0, 0, 1.0, 1), proto(0, 1, 2.0, 1)],
            vec![],
        );
        let a = select_best_prototype(&store);
        let b = select_best_prototype(&store);
        assert_eq!(a, b);
    }
}
