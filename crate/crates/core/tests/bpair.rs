mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use blockpair::bmerge::bmerge_dump;
use blockpair::bpair::{bpair, build_graph, pair_programs, PairError, Pairing, Side};
use blockpair::ingest::{BasicBlock, BlockId};

use common::{closure_components, random_blocks, unlzw};

fn instance(seed: u64) -> (Vec<BasicBlock>, Vec<BasicBlock>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        random_blocks(&mut rng, 10, 12, 0x1000),
        random_blocks(&mut rng, 10, 12, 0x9000),
    )
}

/// (left ids, right ids) per component as reported by `bpair`.
fn partition(p: &Pairing) -> BTreeSet<(Vec<BlockId>, Vec<BlockId>)> {
    let mut out: BTreeSet<_> = p
        .pairs
        .iter()
        .map(|x| (x.left.merged_from.clone(), x.right.merged_from.clone()))
        .collect();
    for c in &p.one_sided {
        out.insert(match c.side {
            Side::Left => (c.block_ids.clone(), vec![]),
            Side::Right => (vec![], c.block_ids.clone()),
        });
    }
    out
}

proptest! {
    #[test]
    fn components_match_transitive_closure(seed in any::<u64>()) {
        let (l, r) = instance(seed);
        prop_assert_eq!(partition(&bpair(&l, &r)), closure_components(&l, &r));
    }

    #[test]
    fn ids_partitioned(seed in any::<u64>()) {
        let (l, r) = instance(seed);
        let p = bpair(&l, &r);
        let mut seen: Vec<BlockId> = partition(&p).into_iter().flat_map(|(a, b)| a.into_iter().chain(b)).collect();
        seen.sort_unstable();
        let mut want: Vec<BlockId> = l.iter().chain(&r).map(|b| b.id).collect();
        want.sort_unstable();
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn edges_are_exactly_intersections(seed in any::<u64>()) {
        let (l, r) = instance(seed);
        let g = build_graph(&l, &r);
        for (u, a) in l.iter().enumerate() {
            for (v, b) in r.iter().enumerate() {
                prop_assert_eq!(g.edges.contains(&(u, v)), a.labels.intersects(&b.labels));
            }
        }
    }

    #[test]
    fn swapping_sides_swaps_pairs(seed in any::<u64>()) {
        let (l, r) = instance(seed);
        let ab: BTreeSet<_> = partition(&bpair(&l, &r)).into_iter().map(|(a, b)| (b, a)).collect();
        prop_assert_eq!(ab, partition(&bpair(&r, &l)));
    }

    #[test]
    fn input_order_irrelevant(seed in any::<u64>(), shuffle in any::<u64>()) {
        let (l, r) = instance(seed);
        let (mut l2, mut r2) = (l.clone(), r.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        l2.shuffle(&mut rng);
        r2.shuffle(&mut rng);
        prop_assert_eq!(bpair(&l2, &r2), bpair(&l, &r));
    }

    #[test]
    fn shared_labels_nonempty(seed in any::<u64>()) {
        let (l, r) = instance(seed);
        for p in bpair(&l, &r).pairs {
            prop_assert!(!p.shared_labels.is_empty());
            prop_assert_eq!(p.shared_labels, p.left.labels.intersection(&p.right.labels));
        }
    }
}

#[test]
fn unlzw_patch_blocks_form_one_component() {
    let (o0, o3) = (unlzw("O0"), unlzw("O3"));
    let f0 = o0.function("unlzw").unwrap();
    let f3 = o3.function("unlzw").unwrap();
    let patch = [0x400a40, 0x400a50, 0x400a60, 0x400a70];
    let u: Vec<BasicBlock> = f0
        .blocks
        .iter()
        .filter(|b| patch.contains(&b.start_address))
        .cloned()
        .collect();
    let v_starts = [
        0x400820, 0x400828, 0x40082c, 0x400834, 0x40083c, 0x400844, 0x400848, 0x400850, 0x40085c,
    ];
    let v: Vec<BasicBlock> = f3
        .blocks
        .iter()
        .filter(|b| v_starts.contains(&b.start_address))
        .cloned()
        .collect();
    assert_eq!((u.len(), v.len()), (4, 9));

    let comps = closure_components(&u, &v);
    assert_eq!(comps.len(), 1);
    let p = bpair(&u, &v);
    assert_eq!(p.pairs.len(), 1);
    assert!(p.one_sided.is_empty());
    assert_eq!(p.pairs[0].left.merged_from.len(), 4);
    assert_eq!(p.pairs[0].right.merged_from.len(), 9);
}

#[test]
fn unlzw_program_pairing() {
    let (l, _) = bmerge_dump(&unlzw("O0")).unwrap();
    let (r, _) = bmerge_dump(&unlzw("O3")).unwrap();
    let paired = pair_programs(&l, &r).unwrap();
    assert_eq!(paired.pairs.len(), 4);
    assert!(paired.unmatched.one_sided_components.is_empty());
    let big = paired
        .pairs
        .iter()
        .find(|p| p.right_block.merged_from.len() == 9)
        .unwrap();
    assert_eq!(big.left_block.start_address, 0x400a40);
    let lines: Vec<u32> = big.shared_labels.iter().map(|s| s.line()).collect();
    assert!(
        lines.contains(&235) && lines.contains(&236) && lines.contains(&237),
        "{lines:?}"
    );
    assert!(big.shared_labels.iter().all(|s| s.file() == "unlzw.c"));
}

#[test]
fn same_build_twice_is_an_error() {
    let d = unlzw("O0");
    assert!(matches!(pair_programs(&d, &d), Err(PairError::IdenticalConfigs(_))));
}

#[test]
fn functions_join_by_name_only() {
    let (l, _) = bmerge_dump(&unlzw("O0")).unwrap();
    let (mut r, _) = bmerge_dump(&unlzw("O3")).unwrap();
    for f in &mut r.functions {
        f.name = format!("{}_renamed", f.name);
    }
    let paired = pair_programs(&l, &r).unwrap();
    assert!(paired.pairs.is_empty());
    assert_eq!(paired.unmatched.left_only_functions.len(), l.functions.len());
    assert_eq!(paired.unmatched.right_only_functions.len(), r.functions.len());
}
