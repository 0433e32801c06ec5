//! Node tables for drawing the first few steps of each rule as a tree.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::azema_yor::AySchedule;
use crate::markovian::MarkovianPolicy;
use crate::montecarlo::{AyWalker, Decision};

/// Largest depth for the non-recombining tree.
pub const MAX_PATH_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    pub rule: &'static str,
    /// `t:x` for the lattice, the visited states joined by `-` for paths.
    pub node: String,
    pub t: usize,
    pub x: i64,
    /// `stop`, `continue` or `coin`.
    pub decision: &'static str,
    /// Probability of stopping at this node.
    pub bias: f64,
}

fn classify(p: f64) -> &'static str {
    if p >= 1.0 {
        "stop"
    } else if p <= 0.0 {
        "continue"
    } else {
        "coin"
    }
}

/// Recombining lattice of reachable `(t, x)` for a state-indexed rule.
pub fn markovian_tree(p: &MarkovianPolicy, depth: usize) -> Vec<TreeNode> {
    let mut out = Vec::new();
    let mut frontier: BTreeSet<i64> = BTreeSet::from([0]);
    for t in 0..=depth {
        let mut next = BTreeSet::new();
        for &x in &frontier {
            let r = p.r(x);
            out.push(TreeNode {
                rule: "markovian",
                node: format!("{t}:{x}"),
                t,
                x,
                decision: classify(r),
                bias: r,
            });
            if r < 1.0 {
                next.insert(x - 1);
                next.insert(x + 1);
            }
        }
        frontier = next;
    }
    out
}

/// Every path of length at most `depth` under the drawdown rule, continuing
/// through coins as if they came up heads.
pub fn ay_tree(s: &AySchedule, depth: usize) -> Vec<TreeNode> {
    let depth = depth.min(MAX_PATH_DEPTH);
    let mut out = Vec::new();
    let walker = AyWalker::new(s);
    expand(walker, vec![0], depth, &mut out);
    out
}

fn expand(mut walker: AyWalker<'_>, path: Vec<i64>, depth: usize, out: &mut Vec<TreeNode>) {
    let x = *path.last().expect("nonempty path");
    walker.advance(x);
    let first = walker.decision(x);
    let bias = match first {
        Decision::Stop => 1.0,
        Decision::Continue => 0.0,
        Decision::Coin { rho, .. } => rho,
    };
    out.push(TreeNode {
        rule: "azema_yor",
        node: path
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("-"),
        t: path.len() - 1,
        x,
        decision: match first {
            Decision::Stop => "stop",
            Decision::Continue => "continue",
            Decision::Coin { .. } => "coin",
        },
        bias,
    });
    loop {
        match walker.decision(x) {
            Decision::Stop => return,
            Decision::Continue => break,
            Decision::Coin { k, .. } => walker.mark_heads(k),
        }
    }
    if path.len() > depth {
        return;
    }
    for step in [1, -1] {
        let mut child = path.clone();
        child.push(x + step);
        expand(walker.clone(), child, depth, out);
    }
}

pub fn to_csv(nodes: &[TreeNode]) -> String {
    let mut s = String::from("rule,node,t,x,decision,bias\n");
    for n in nodes {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            n.rule, n.node, n.t, n.x, n.decision, n.bias
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::azema_yor::{build_schedule, ScheduleOptions};
    use crate::markovian::{build_policy, PolicyOptions};
    use crate::measure::{CasinoMode, LatticeMeasure};

    #[test]
    fn casino_trees() {
        let m = LatticeMeasure::casino(CasinoMode::AsPrinted);
        let p = build_policy(&m, &PolicyOptions::default()).unwrap();
        let lattice = markovian_tree(&p, 4);
        // -1 stops surely, so t = 2 holds only x = 0 and x = 2
        let t2: Vec<i64> = lattice.iter().filter(|n| n.t == 2).map(|n| n.x).collect();
        assert_eq!(t2, vec![0, 2]);
        let s = build_schedule(
            &m,
            &ScheduleOptions {
                max_level: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let paths = ay_tree(&s, 3);
        let find = |id: &str| paths.iter().find(|n| n.node == id).unwrap();
        assert_eq!(find("0-1-2-1").decision, "stop");
        assert_eq!(find("0-1-0-1").decision, "continue");
        assert_eq!(find("0-1").decision, "coin");
        assert!(paths.iter().all(|n| n.node != "0--1-0"));
    }
}
