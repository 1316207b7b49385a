//! Joint-posterior construction from per-modality Gaussian experts.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::DiagonalGaussian;
use crate::error::{Error, Result};

/// One optional expert per modality, all sharing a `batch × dim` shape.
#[derive(Clone, Debug)]
pub struct ExpertSet {
    experts: Vec<Option<DiagonalGaussian>>,
    batch: usize,
    dim: usize,
}

impl ExpertSet {
    pub fn new(tape: &Tape, experts: Vec<Option<DiagonalGaussian>>) -> Result<Self> {
        let mut shape = None;
        for e in experts.iter().flatten() {
            let s = e.batch_dim(tape);
            match shape {
                None => shape = Some(s),
                Some(first) if first != s => {
                    return Err(Error::dimension("expert set", [first.0, first.1], [s.0, s.1]));
                }
                _ => {}
            }
        }
        let (batch, dim) = shape.ok_or_else(|| Error::Contract("an expert set needs at least one expert".into()))?;
        Ok(Self { experts, batch, dim })
    }

    pub fn modality_count(&self) -> usize {
        self.experts.len()
    }

    pub fn availability_mask(&self) -> Vec<bool> {
        self.experts.iter().map(Option::is_some).collect()
    }

    pub fn expert(&self, m: usize) -> Option<&DiagonalGaussian> {
        self.experts.get(m).and_then(Option::as_ref)
    }

    pub fn batch_dim(&self) -> (usize, usize) {
        (self.batch, self.dim)
    }

    /// Keep only the experts whose modality index is in `subset`. The result
    /// may hold no experts at all.
    pub fn restrict(&self, subset: &[usize]) -> Self {
        Self {
            experts: self
                .experts
                .iter()
                .enumerate()
                .map(|(m, e)| if subset.contains(&m) { *e } else { None })
                .collect(),
            batch: self.batch,
            dim: self.dim,
        }
    }

    fn present(&self) -> Vec<DiagonalGaussian> {
        self.experts.iter().flatten().copied().collect()
    }
}

/// Product of Gaussian experts: precisions add, the mean is the
/// precision-weighted average. `include_prior` adds the `N(0, I)` expert.
pub fn poe_fuse(tape: &mut Tape, set: &ExpertSet, include_prior: bool) -> Result<DiagonalGaussian> {
    let experts = set.present();
    let (batch, dim) = set.batch_dim();
    match (experts.as_slice(), include_prior) {
        ([], false) => return Err(Error::Contract("product of experts over an empty set without prior".into())),
        ([], true) => return Ok(DiagonalGaussian::standard_normal(tape, batch, dim)),
        ([single], false) => return Ok(*single),
        _ => {}
    }
    let mut precision_sum = None;
    let mut weighted_mean_sum = None;
    for e in &experts {
        let neg = tape.neg(e.log_variance());
        let precision = tape.exp(neg);
        let weighted = tape.mul(e.mean(), precision);
        precision_sum = Some(match precision_sum {
            None => precision,
            Some(acc) => tape.add(acc, precision),
        });
        weighted_mean_sum = Some(match weighted_mean_sum {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    let mut precision_sum = precision_sum.unwrap();
    if include_prior {
        // prior expert: precision 1, mean 0
        precision_sum = tape.add_scalar(precision_sum, 1.0);
    }
    let mean = tape.div(weighted_mean_sum.unwrap(), precision_sum);
    let ln_precision = tape.ln(precision_sum);
    let log_variance = tape.neg(ln_precision);
    DiagonalGaussian::new(tape, mean, log_variance)
}

/// All non-empty subsets of `0..modality_count`, ordered by size and then
/// lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetLattice {
    pub modality_count: usize,
    pub subsets: Vec<Vec<usize>>,
}

impl SubsetLattice {
    pub fn len(&self) -> usize {
        self.subsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsets.is_empty()
    }
}

pub fn enumerate_subsets(modality_count: usize) -> Result<SubsetLattice> {
    if modality_count == 0 || modality_count > 16 {
        return Err(Error::Contract(format!("subset lattice needs 1..=16 modalities, got {modality_count}")));
    }
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << modality_count))
        .map(|mask| (0..modality_count).filter(|&m| mask & (1 << m) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(SubsetLattice { modality_count, subsets })
}

pub fn subset_label(subset: &[usize]) -> String {
    let inner: Vec<String> = subset.iter().map(usize::to_string).collect();
    format!("{{{}}}", inner.join(","))
}

/// One product of experts per subset of the lattice.
pub fn mopoe_posteriors(
    tape: &mut Tape,
    set: &ExpertSet,
    lattice: &SubsetLattice,
    include_prior: bool,
) -> Result<Vec<DiagonalGaussian>> {
    if set.modality_count() != lattice.modality_count || set.availability_mask().contains(&false) {
        return Err(Error::Contract("subset mixture needs every modality's expert present".into()));
    }
    lattice.subsets.iter().map(|s| poe_fuse(tape, &set.restrict(s), include_prior)).collect()
}

/// Stratified realisation of a uniform mixture over `modality_count`
/// experts: every expert gets ⌊B/M⌋ or ⌈B/M⌉ batch rows. Which experts get
/// the extra rows and the row order are drawn from `rng`; with a single
/// expert no randomness is consumed.
pub fn moe_stratified_assign(batch_size: usize, modality_count: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if modality_count == 0 || batch_size < modality_count {
        return Err(Error::Contract(format!(
            "stratified mixture needs batch_size >= modality count (got {batch_size} < {modality_count})"
        )));
    }
    if modality_count == 1 {
        return Ok(vec![0; batch_size]);
    }
    let base = batch_size / modality_count;
    let extra = batch_size % modality_count;
    let mut order: Vec<usize> = (0..modality_count).collect();
    order.shuffle(rng);
    let mut assignment = Vec::with_capacity(batch_size);
    for (rank, &m) in order.iter().enumerate() {
        let count = base + usize::from(rank < extra);
        assignment.extend(std::iter::repeat_n(m, count));
    }
    assignment.shuffle(rng);
    Ok(assignment)
}

/// Shared + per-modality private latent widths for the disentangled model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmvaeLatentLayout {
    pub shared_dim: usize,
    pub private_dims: Vec<usize>,
}

impl DmvaeLatentLayout {
    pub fn new(shared_dim: usize, private_dims: Vec<usize>) -> Result<Self> {
        if shared_dim == 0 || private_dims.is_empty() || private_dims.contains(&0) {
            return Err(Error::Contract(format!(
                "latent layout needs positive widths (shared {shared_dim}, private {private_dims:?})"
            )));
        }
        Ok(Self { shared_dim, private_dims })
    }

    /// Width of modality `m`'s encoder head and decoder input.
    pub fn modality_width(&self, m: usize) -> usize {
        self.shared_dim + self.private_dims[m]
    }

    /// Shared plus every private block.
    pub fn total_dim(&self) -> usize {
        self.shared_dim + self.private_dims.iter().sum::<usize>()
    }
}

/// Shared posterior by product of the shared experts; private posteriors are
/// passed through unchanged.
pub fn dmvae_fuse(
    tape: &mut Tape,
    shared: &ExpertSet,
    layout: &DmvaeLatentLayout,
    per_modality_private: Vec<Option<DiagonalGaussian>>,
    include_prior: bool,
) -> Result<(DiagonalGaussian, Vec<Option<DiagonalGaussian>>)> {
    if shared.batch_dim().1 != layout.shared_dim {
        return Err(Error::dimension("shared expert width", [layout.shared_dim], [shared.batch_dim().1]));
    }
    if per_modality_private.len() != layout.private_dims.len() {
        return Err(Error::Contract(format!(
            "layout has {} private blocks, got {} private posteriors",
            layout.private_dims.len(),
            per_modality_private.len()
        )));
    }
    for (m, p) in per_modality_private.iter().enumerate() {
        if let Some(p) = p {
            let w = p.batch_dim(tape).1;
            if w != layout.private_dims[m] {
                return Err(Error::dimension(
                    format!("private posterior of modality {m}"),
                    [layout.private_dims[m]],
                    [w],
                ));
            }
        }
    }
    let fused = poe_fuse(tape, shared, include_prior)?;
    Ok((fused, per_modality_private))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn gaussian(tape: &mut Tape, mean: &[f64], logvar: &[f64]) -> DiagonalGaussian {
        let d = mean.len();
        let m = tape.constant(&[1, d], mean.to_vec());
        let l = tape.constant(&[1, d], logvar.to_vec());
        DiagonalGaussian::new(tape, m, l).unwrap()
    }

    fn params(tape: &Tape, g: &DiagonalGaussian) -> (Vec<f64>, Vec<f64>) {
        (tape.value(g.mean()).to_vec(), tape.value(g.log_variance()).iter().map(|v| v.exp()).collect())
    }

    #[test]
    fn two_unit_experts_halve_the_variance() {
        let mut tape = Tape::new();
        let a = gaussian(&mut tape, &[0.0], &[0.0]);
        let b = gaussian(&mut tape, &[0.0], &[0.0]);
        let set = ExpertSet::new(&tape, vec![Some(a), Some(b)]).unwrap();
        let f = poe_fuse(&mut tape, &set, false).unwrap();
        let (m, v) = params(&tape, &f);
        assert_eq!(m, [0.0]);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_expert_with_prior() {
        let mut tape = Tape::new();
        let a = gaussian(&mut tape, &[2.0], &[0.0]);
        let set = ExpertSet::new(&tape, vec![Some(a)]).unwrap();
        let f = poe_fuse(&mut tape, &set, true).unwrap();
        let (m, v) = params(&tape, &f);
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_expert_without_prior_is_unchanged() {
        let mut tape = Tape::new();
        let a = gaussian(&mut tape, &[0.3, -1.0], &[0.2, 1.5]);
        let set = ExpertSet::new(&tape, vec![None, Some(a)]).unwrap();
        let f = poe_fuse(&mut tape, &set, false).unwrap();
        assert_eq!(f, a);
    }

    #[test]
    fn empty_set_without_prior_is_an_error() {
        let mut tape = Tape::new();
        let a = gaussian(&mut tape, &[0.0], &[0.0]);
        let set = ExpertSet::new(&tape, vec![Some(a), None]).unwrap();
        let empty = set.restrict(&[1]);
        assert!(matches!(poe_fuse(&mut tape, &empty, false), Err(Error::Contract(_))));
        let prior = poe_fuse(&mut tape, &empty, true).unwrap();
        assert_eq!(params(&tape, &prior), (vec![0.0], vec![1.0]));
        assert!(ExpertSet::new(&tape, vec![None, None]).is_err());
    }

    #[test]
    fn expert_shapes_must_agree() {
        let mut tape = Tape::new();
        let a = gaussian(&mut tape, &[0.0], &[0.0]);
        let b = gaussian(&mut tape, &[0.0, 1.0], &[0.0, 0.0]);
        assert!(ExpertSet::new(&tape, vec![Some(a), Some(b)]).is_err());
    }

    #[test]
    fn lattice_orders_by_size_then_lexicographically() {
        assert_eq!(enumerate_subsets(1).unwrap().subsets, vec![vec![0]]);
        assert_eq!(enumerate_subsets(2).unwrap().subsets, vec![vec![0], vec![1], vec![0, 1]]);
        let three = enumerate_subsets(3).unwrap();
        assert_eq!(three.len(), 7);
        assert_eq!(three.subsets[3], vec![0, 1]);
        assert_eq!(three.subsets[6], vec![0, 1, 2]);
        assert!(enumerate_subsets(0).is_err());
        for m in 1..=6 {
            let l = enumerate_subsets(m).unwrap();
            assert_eq!(l.len(), (1 << m) - 1);
            let mut dedup = l.subsets.clone();
            dedup.dedup();
            assert_eq!(dedup.len(), l.len());
        }
    }

    #[test]
    fn mopoe_subsets_delegate_to_poe() {
        let mut tape = Tape::new();
        let a = gaussian(&mut tape, &[0.0], &[0.0]);
        let b = gaussian(&mut tape, &[0.0], &[0.0]);
        let set = ExpertSet::new(&tape, vec![Some(a), Some(b)]).unwrap();
        let lattice = enumerate_subsets(2).unwrap();
        let posts = mopoe_posteriors(&mut tape, &set, &lattice, true).unwrap();
        assert_eq!(posts.len(), 3);
        let (m0, v0) = params(&tape, &posts[0]);
        assert_eq!(m0, [0.0]);
        assert!((v0[0] - 0.5).abs() < 1e-12);
        let (_, v01) = params(&tape, &posts[2]);
        assert!((v01[0] - 1.0 / 3.0).abs() < 1e-12);

        let partial = ExpertSet::new(&tape, vec![Some(a), None]).unwrap();
        assert!(mopoe_posteriors(&mut tape, &partial, &lattice, true).is_err());
    }

    #[test]
    fn stratified_assignment_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = moe_stratified_assign(32, 2, &mut rng).unwrap();
        assert_eq!(a.iter().filter(|&&m| m == 0).count(), 16);
        let b = moe_stratified_assign(33, 2, &mut rng).unwrap();
        let mut counts = [0, 0];
        b.iter().for_each(|&m| counts[m] += 1);
        counts.sort();
        assert_eq!(counts, [16, 17]);
        assert!(moe_stratified_assign(1, 2, &mut rng).is_err());
    }

    #[test]
    fn stratified_assignment_is_seeded() {
        let a = moe_stratified_assign(31, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = moe_stratified_assign(31, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stratified_frequencies_are_uniform() {
        // counting oracle: tally expert usage over many seeded draws
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        let calls = 4000;
        for _ in 0..calls {
            for m in moe_stratified_assign(7, 3, &mut rng).unwrap() {
                counts[m] += 1;
            }
        }
        let total = (calls * 7) as f64;
        for c in counts {
            assert!((c as f64 / total - 1.0 / 3.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn dmvae_layout_and_fusion() {
        let layout = DmvaeLatentLayout::new(10, vec![10, 10]).unwrap();
        assert_eq!(layout.total_dim(), 30);
        assert_eq!(layout.modality_width(1), 20);

        let mut tape = Tape::new();
        let s0 = gaussian(&mut tape, &[0.0; 10], &[0.0; 10]);
        let s1 = gaussian(&mut tape, &[0.0; 10], &[0.0; 10]);
        let p0 = gaussian(&mut tape, &[0.5; 10], &[0.1; 10]);
        let shared = ExpertSet::new(&tape, vec![Some(s0), Some(s1)]).unwrap();
        let (fused, privates) = dmvae_fuse(&mut tape, &shared, &layout, vec![Some(p0), None], true).unwrap();
        let (_, v) = params(&tape, &fused);
        assert!(v.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(privates[0], Some(p0));

        let one = shared.restrict(&[0]);
        let (fused, _) = dmvae_fuse(&mut tape, &one, &layout, vec![None, None], true).unwrap();
        let (_, v) = params(&tape, &fused);
        assert!(v.iter().all(|v| (v - 0.5).abs() < 1e-12));

        let narrow = gaussian(&mut tape, &[0.0; 3], &[0.0; 3]);
        assert!(dmvae_fuse(&mut tape, &shared, &layout, vec![Some(narrow), None], true).is_err());
    }
}
