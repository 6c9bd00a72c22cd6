//! Brute-force predicate evaluation of both mask regimes, one (i, j) pair at
//! a time with plain set-membership tests. Used only to cross-check
//! [`super::build_dis`] and [`super::build_har`].

use super::{AttnMask, Regime};
use crate::partition::PartitionLayout;

fn in_prompt(layout: &PartitionLayout, n: usize, z: usize) -> bool {
    layout.t_inst[n].contains(&z)
}

fn in_any_prompt(layout: &PartitionLayout, z: usize) -> bool {
    (0..layout.num_instances()).any(|n| in_prompt(layout, n, z))
}

fn in_instance(layout: &PartitionLayout, n: usize, z: usize) -> bool {
    in_prompt(layout, n, z) || layout.l_inst[n].contains(&z) || layout.c_inst[n].contains(&z)
}

fn in_background(layout: &PartitionLayout, z: usize) -> bool {
    layout.t_g.contains(&z) || layout.l_u.contains(&z) || layout.c_u.contains(&z)
}

fn dis(layout: &PartitionLayout, i: usize, j: usize) -> bool {
    let case1 = in_background(layout, i) && !in_any_prompt(layout, j);
    let case2 = (0..layout.num_instances())
        .any(|n| in_instance(layout, n, i) && in_instance(layout, n, j));
    case1 || case2
}

fn har(layout: &PartitionLayout, i: usize, j: usize) -> bool {
    let case1 = !in_any_prompt(layout, i) && !in_any_prompt(layout, j);
    let case2 = (0..layout.num_instances())
        .any(|n| in_prompt(layout, n, i) && in_instance(layout, n, j));
    case1 || case2
}

pub fn oracle_mask(layout: &PartitionLayout, regime: Regime) -> AttnMask {
    let pred = match regime {
        Regime::Dis => dis,
        Regime::Har => har,
    };
    AttnMask::from_fn(layout.seq_len, |i, j| pred(layout, i, j))
}
