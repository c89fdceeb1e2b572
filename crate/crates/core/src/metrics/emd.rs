//! Earth mover's distance between equal-size point sets: the optimal
//! assignment under pairwise euclidean cost, exact via shortest augmenting
//! paths (Jonker-Volgenant style, O(N^3)) or approximate via a forward
//! auction with configurable slack.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// How the assignment problem is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmdMethod {
    /// Optimal assignment; guaranteed for N <= 1024.
    Exact,
    /// epsilon-auction: cost within epsilon * N of optimal, never below it.
    Auction,
}

/// Point count above which [`emd`] switches from exact to auction.
pub const EXACT_EMD_LIMIT: usize = 1024;

fn cost_matrix(p: &PointCloud, q: &PointCloud) -> Array2<f64> {
    let n = p.len();
    let mut cost = Array2::zeros((n, n));
    for (i, a) in p.points().rows().into_iter().enumerate() {
        for (j, b) in q.points().rows().into_iter().enumerate() {
            let d2: f64 = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            cost[[i, j]] = d2.sqrt();
        }
    }
    cost
}

/// (1/N) min over bijections of the summed euclidean distances.
pub fn emd(p: &PointCloud, q: &PointCloud, method: EmdMethod) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SizeError(format!(
            "emd needs equal-size clouds, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.dim() != q.dim() {
        return Err(Error::SizeError("emd needs equal dimensionality".into()));
    }
    let cost = cost_matrix(p, q);
    let n = p.len();
    let total = match method {
        EmdMethod::Exact if n <= EXACT_EMD_LIMIT => assignment_exact(&cost),
        _ => {
            let max_cost = cost.iter().cloned().fold(0.0f64, f64::max);
            let eps = 1e-3 * max_cost / n as f64;
            auction(&cost, eps.max(f64::MIN_POSITIVE))
        }
    };
    Ok(total / n as f64)
}

/// Optimal total assignment cost via shortest augmenting paths with dual
/// potentials (rows assigned one by one).
pub fn assignment_exact(cost: &Array2<f64>) -> f64 {
    let n = cost.nrows();
    // column 0 is a virtual root; job[c] = row assigned to column c
    let mut job = vec![usize::MAX; n + 1];
    let mut potential_row = vec![0.0f64; n];
    let mut potential_col = vec![0.0f64; n + 1];

    for row in 0..n {
        let mut col = n; // virtual column holding the new row
        job[col] = row;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prev = vec![usize::MAX; n + 1];
        let mut in_tree = vec![false; n + 1];

        while job[col] != usize::MAX {
            in_tree[col] = true;
            let r = job[col];
            let mut delta = f64::INFINITY;
            let mut next_col = 0;
            for c in 0..n {
                if in_tree[c] {
                    continue;
                }
                let reduced = cost[[r, c]] - potential_row[r] - potential_col[c];
                if reduced < min_to[c] {
                    min_to[c] = reduced;
                    prev[c] = col;
                }
                if min_to[c] < delta {
                    delta = min_to[c];
                    next_col = c;
                }
            }
            for c in 0..=n {
                if in_tree[c] {
                    if job[c] != usize::MAX {
                        potential_row[job[c]] += delta;
                    }
                    potential_col[c] -= delta;
                } else {
                    min_to[c] -= delta;
                }
            }
            col = next_col;
        }
        // augment along the alternating path
        while col != n {
            let p = prev[col];
            job[col] = job[p];
            col = p;
        }
    }

    let mut total = 0.0;
    for c in 0..n {
        if job[c] != usize::MAX {
            total += cost[[job[c], c]];
        }
    }
    total
}

/// Forward auction for the assignment problem: terminates with a total cost
/// at most `eps * n` above the optimum (epsilon-complementary slackness).
pub fn auction(cost: &Array2<f64>, eps: f64) -> f64 {
    let n = cost.nrows();
    let mut price = vec![0.0f64; n];
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut queue: Vec<usize> = (0..n).collect();

    while let Some(person) = queue.pop() {
        // best and second-best object by value = -cost - price
        let mut best = (f64::NEG_INFINITY, 0);
        let mut second = f64::NEG_INFINITY;
        for j in 0..n {
            let v = -cost[[person, j]] - price[j];
            if v > best.0 {
                second = best.0;
                best = (v, j);
            } else if v > second {
                second = v;
            }
        }
        let j = best.1;
        let increment = best.0 - second + eps;
        price[j] += increment;
        if let Some(evicted) = owner[j].replace(person) {
            assigned[evicted] = None;
            queue.push(evicted);
        }
        assigned[person] = Some(j);
    }

    (0..n).map(|i| cost[[i, assigned[i].unwrap()]]).sum()
}
