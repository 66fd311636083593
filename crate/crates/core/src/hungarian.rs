//! Minimum-cost assignment on dense square matrices.
//!
//! Shortest-augmenting-path solver in the Jonker-Volgenant style: one
//! Dijkstra-like scan per row over reduced costs, then dual updates and path
//! augmentation. Costs must be finite; represent forbidden cells with a large
//! finite sentinel instead of infinity.

/// Column assigned to each row, minimizing total cost. `cost` is row-major
/// n×n. Ties between equally short paths prefer unassigned columns; the
/// result is deterministic for a given matrix.
pub fn solve(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be square");
    debug_assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");

    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut col4row = vec![usize::MAX; n];
    let mut row4col = vec![usize::MAX; n];
    let mut shortest = vec![0.0f64; n];
    let mut path = vec![usize::MAX; n];
    let mut scanned_row = vec![false; n];
    let mut scanned_col = vec![false; n];
    let mut remaining = vec![0usize; n];

    for cur_row in 0..n {
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        path.iter_mut().for_each(|p| *p = usize::MAX);
        scanned_row.iter_mut().for_each(|b| *b = false);
        scanned_col.iter_mut().for_each(|b| *b = false);
        for (it, slot) in remaining.iter_mut().enumerate() {
            *slot = n - it - 1;
        }
        let mut num_remaining = n;

        let mut min_val = 0.0f64;
        let mut sink = usize::MAX;
        let mut i = cur_row;
        while sink == usize::MAX {
            scanned_row[i] = true;
            let row = &cost[i * n..(i + 1) * n];
            let mut index = usize::MAX;
            let mut lowest = f64::INFINITY;
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let r = min_val + row[j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == usize::MAX) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            debug_assert!(min_val.is_finite(), "square finite matrix is always feasible");
            let j = remaining[index];
            if row4col[j] == usize::MAX {
                sink = j;
            } else {
                i = row4col[j];
            }
            scanned_col[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur_row] += min_val;
        for (i2, &scanned) in scanned_row.iter().enumerate() {
            if scanned && i2 != cur_row {
                u[i2] += min_val - shortest[col4row[i2]];
            }
        }
        for (j, &scanned) in scanned_col.iter().enumerate() {
            if scanned {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let i2 = path[j];
            row4col[j] = i2;
            std::mem::swap(&mut col4row[i2], &mut j);
            if i2 == cur_row {
                break;
            }
        }
    }

    col4row
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &[f64], n: usize, col4row: &[usize]) -> f64 {
    col4row.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}
