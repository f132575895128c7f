//! Grouping of node blocks by child count.
//!
//! Blocks of a layer are placed into at most `G` groups; each group has a
//! capacity and every block is padded up to the capacity of the smallest
//! group it fits into. The cost of a plan is `sum_i k_i * g_i`. The DP below
//! runs over the sorted unique child counts, which is exact because an
//! optimal plan always uses a subset of those values as capacities.

/// Result of partitioning one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    /// Group capacities in ascending order.
    pub capacities: Vec<u32>,
    /// Group index of each input entry.
    pub assignment: Vec<u32>,
    /// Realized cost `sum_i k_i * g_i`.
    pub overhead: u64,
    /// `ceil(sum(nchs) * (1 + tol))`.
    pub target_overhead: u64,
}

impl PartitionPlan {
    pub fn num_groups(&self) -> usize {
        self.capacities.len()
    }
}

pub fn target_overhead(total: u64, tol: f64) -> u64 {
    // the small offset keeps products like 10 * 1.1 from rounding one past the target
    ((total as f64) * (1.0 + tol) - 1e-9).ceil().max(total as f64) as u64
}

/// Rounds every count up to a multiple of `quantum`.
pub fn round_child_counts(nchs: &[u32], quantum: u32) -> Vec<u32> {
    let q = quantum.max(1);
    nchs.iter().map(|&n| n.div_ceil(q) * q).collect()
}

/// Optimal cost for every group budget `1..=max_groups` together with the
/// boundary choices that realize it.
struct DpTable {
    uniq: Vec<u32>,
    /// `cost[n-1][i]`: best cost covering `uniq[..=i]` with at most `n` groups.
    cost: Vec<Vec<u64>>,
    /// Index of the previous group's top value, or `None` when the best plan
    /// with `n` groups is the one with `n - 1`.
    choice: Vec<Vec<Option<usize>>>,
}

impl DpTable {
    fn build(nchs: &[u32], max_groups: usize) -> Self {
        let mut sorted = nchs.to_vec();
        sorted.sort_unstable();
        let mut uniq: Vec<u32> = Vec::new();
        let mut cum: Vec<u64> = Vec::new();
        for (i, &v) in sorted.iter().enumerate() {
            if uniq.last() == Some(&v) {
                *cum.last_mut().unwrap() = i as u64 + 1;
            } else {
                uniq.push(v);
                cum.push(i as u64 + 1);
            }
        }
        let l = uniq.len();
        let groups = max_groups.max(1).min(l.max(1));
        let mut cost = vec![vec![0u64; l]; groups];
        let mut choice = vec![vec![None; l]; groups];
        for i in 0..l {
            cost[0][i] = uniq[i] as u64 * cum[i];
        }
        for n in 1..groups {
            for i in 0..l {
                let mut best = cost[n - 1][i];
                let mut arg = None;
                for j in 0..i {
                    let c = cost[n - 1][j] + uniq[i] as u64 * (cum[i] - cum[j]);
                    if c < best {
                        best = c;
                        arg = Some(j);
                    }
                }
                cost[n][i] = best;
                choice[n][i] = arg;
            }
        }
        DpTable { uniq, cost, choice }
    }

    fn best(&self, groups: usize) -> u64 {
        *self.cost[groups - 1].last().unwrap()
    }

    fn capacities(&self, groups: usize) -> Vec<u32> {
        let mut tops = Vec::new();
        let mut i = self.uniq.len() - 1;
        let mut n = groups - 1;
        loop {
            match self.choice[n][i] {
                None if n > 0 => n -= 1,
                None => {
                    tops.push(i);
                    break;
                }
                Some(j) => {
                    tops.push(i);
                    i = j;
                    n -= 1;
                }
            }
        }
        tops.reverse();
        tops.into_iter().map(|t| self.uniq[t]).collect()
    }
}

/// Partitions `nchs` into at most `max_groups` groups, choosing the smallest
/// group count whose optimal cost stays within the target overhead and
/// falling back to the largest admissible count otherwise.
pub fn partition_layer(nchs: &[u32], max_groups: usize, tol: f64) -> PartitionPlan {
    assert!(!nchs.is_empty(), "cannot partition an empty layer");
    let total: u64 = nchs.iter().map(|&n| n as u64).sum();
    let target = target_overhead(total, tol);
    let dp = DpTable::build(nchs, max_groups);
    let available = dp.cost.len();
    let groups = (1..=available).find(|&n| dp.best(n) <= target).unwrap_or(available);
    let capacities = dp.capacities(groups);
    let assignment: Vec<u32> = nchs
        .iter()
        .map(|&n| capacities.partition_point(|&c| c < n) as u32)
        .collect();
    let overhead = assignment.iter().map(|&g| capacities[g as usize] as u64).sum();
    debug_assert_eq!(overhead, dp.best(groups));
    PartitionPlan { capacities, assignment, overhead, target_overhead: target }
}

/// Optimal cost achievable with at most `max_groups` groups.
pub fn optimal_overhead(nchs: &[u32], max_groups: usize) -> u64 {
    let dp = DpTable::build(nchs, max_groups);
    dp.best(dp.cost.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_partition;
    use proptest::prelude::*;

    #[test]
    fn uniform_counts_use_one_group() {
        for g in 1..5 {
            let plan = partition_layer(&[3, 3, 3], g, 0.25);
            assert_eq!(plan.capacities, vec![3]);
            assert_eq!(plan.overhead, 9);
        }
    }

    #[test]
    fn two_groups_hit_enumerated_minimum() {
        // exhaustive enumeration over boundary placements gives 16
        assert_eq!(brute_partition(&[2, 2, 3, 7], 2).unwrap(), 16);
        let plan = partition_layer(&[2, 2, 3, 7], 2, 0.25);
        assert_eq!(plan.capacities, vec![3, 7]);
        assert_eq!(plan.overhead, 16);
        assert_eq!(plan.target_overhead, 18);
        assert_eq!(plan.assignment, vec![0, 0, 0, 1]);
    }

    #[test]
    fn tight_tolerance_falls_back_to_max_groups() {
        // 1 group costs 28, 2 groups 16, 3 groups 14 = target at tol ~ 0
        let plan = partition_layer(&[2, 2, 3, 7], 3, 1e-6);
        assert_eq!(plan.capacities, vec![2, 3, 7]);
        assert_eq!(plan.overhead, 14);
        let plan = partition_layer(&[1, 5, 9, 13], 2, 1e-6);
        assert_eq!(plan.num_groups(), 2);
        assert_eq!(plan.overhead, brute_partition(&[1, 5, 9, 13], 2).unwrap());
    }

    #[test]
    fn loose_tolerance_prefers_fewer_groups() {
        let plan = partition_layer(&[2, 2, 3, 7], 8, 1.0);
        assert_eq!(plan.num_groups(), 1);
        assert_eq!(plan.overhead, 28);
    }

    #[test]
    fn rounding_matches_examples() {
        assert_eq!(round_child_counts(&[7], 10), vec![10]);
        assert_eq!(round_child_counts(&[10], 10), vec![10]);
        let many: Vec<u32> = (1..=1000).collect();
        let mut rounded = round_child_counts(&many, 10);
        rounded.sort_unstable();
        rounded.dedup();
        assert!(rounded.len() <= 100);
    }

    proptest! {
        #[test]
        fn dp_matches_brute_force(nchs in proptest::collection::vec(1u32..12, 1..20), g in 1usize..5, tol in 0.01f64..1.0) {
            let mut uniq = nchs.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assume!(uniq.len() <= 10);
            let plan = partition_layer(&nchs, g, tol);
            prop_assert!(plan.num_groups() <= g);
            for (n, a) in nchs.iter().zip(&plan.assignment) {
                prop_assert!(*n <= plan.capacities[*a as usize]);
            }
            prop_assert_eq!(plan.overhead, brute_partition(&nchs, plan.num_groups()).unwrap());
            prop_assert_eq!(optimal_overhead(&nchs, g), brute_partition(&nchs, g).unwrap());
        }
    }
}
