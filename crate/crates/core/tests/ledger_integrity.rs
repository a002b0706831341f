use pnc_core::ledger::{verify_blocks, Block, Ledger};
use pnc_core::sim::{World, WorldConfig};
use proptest::prelude::*;

fn sealed_blocks() -> Vec<Block> {
    let mut w = World::new(WorldConfig {
        seed: 3,
        users: 3,
        stations: 2,
        slots: 2,
        ..WorldConfig::default()
    })
    .unwrap();
    w.run_all();
    w.seal();
    w.ledger().blocks().to_vec()
}

/// Applies one byte flip to the canonical form of block `i`.
/// `None` means the mutated bytes no longer decode, which also counts as detected.
fn mutate(blocks: &[Block], i: usize, pos: usize, xor: u8) -> Option<Vec<Block>> {
    let mut bytes = blocks[i].encode();
    let pos = pos % bytes.len();
    bytes[pos] ^= xor;
    let b = Block::decode(&bytes).ok()?;
    let mut out = blocks.to_vec();
    out[i] = b;
    Some(out)
}

#[test]
fn honest_chain_verifies_and_roundtrips() {
    let blocks = sealed_blocks();
    assert!(blocks.len() > 2);
    assert!(verify_blocks(&blocks));
    for b in &blocks {
        assert_eq!(&Block::decode(&b.encode()).unwrap(), b);
    }
    let ledger = Ledger::from_blocks(blocks.clone()).unwrap();
    assert!(ledger.verify_chain());
}

#[test]
fn reordering_or_dropping_blocks_is_detected() {
    let blocks = sealed_blocks();
    let mut swapped = blocks.clone();
    swapped.swap(1, 2);
    assert!(!verify_blocks(&swapped));
    let mut dropped = blocks.clone();
    dropped.remove(1);
    assert!(!verify_blocks(&dropped));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn single_byte_mutation_is_detected(i in any::<prop::sample::Index>(), pos in any::<usize>(), xor in 1u8..=255) {
        let blocks = sealed_blocks();
        let i = i.index(blocks.len());
        if let Some(mutated) = mutate(&blocks, i, pos, xor) {
            prop_assert!(!verify_blocks(&mutated));
            prop_assert!(Ledger::from_blocks(mutated).is_err());
        }
    }
}
