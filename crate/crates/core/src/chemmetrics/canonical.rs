use crate::hashing::hash_words;
use crate::molio::MolGraph;

/// Isomorphism-invariant 64-bit digest by Weisfeiler-Lehman refinement over
/// atom types and bond orders, one round per atom slot.
///
/// Equal graphs always collide; non-isomorphic graphs that 1-WL cannot
/// separate (for instance some pairs of regular graphs) collide as well.
pub fn canonical_hash(g: &MolGraph) -> u64 {
    let atoms: Vec<usize> = g.occupied().collect();
    let n = g.n_slots();
    let mut label = vec![0u64; n];
    for &i in &atoms {
        label[i] = hash_words([1, g.atom(i).unwrap() as u64]);
    }
    for round in 0..n.max(1) {
        let mut next = label.clone();
        for &i in &atoms {
            let mut nb: Vec<u64> = g
                .neighbors(i)
                .map(|(j, c)| hash_words([c as u64 + 1, label[j]]))
                .collect();
            nb.sort_unstable();
            next[i] = hash_words([2, round as u64, label[i]].into_iter().chain(nb));
        }
        label = next;
    }
    let mut nodes: Vec<u64> = atoms.iter().map(|&i| label[i]).collect();
    nodes.sort_unstable();
    let mut edges: Vec<u64> = g
        .edges()
        .into_iter()
        .map(|(i, j, c)| {
            let (a, b) = if label[i] <= label[j] {
                (label[i], label[j])
            } else {
                (label[j], label[i])
            };
            hash_words([c as u64 + 1, a, b])
        })
        .collect();
    edges.sort_unstable();
    hash_words(
        [3, nodes.len() as u64]
            .into_iter()
            .chain(nodes)
            .chain([edges.len() as u64])
            .chain(edges),
    )
}
