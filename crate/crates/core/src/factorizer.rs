// SPDX-License-Identifier: Apache-2.0

//! Factorization of one layer into five sparse sub-layers.
//!
//! A weight tensor `C × Kh × Kw × F` is split by four chained truncated SVDs:
//!
//! 1. `C × (Kh·Kw·F)` at rank `Rc`: left factor is the channel filter.
//! 2. the remainder as `(Rc·Kh) × (Kw·F)` at rank `Rv`: left factor is the
//!    vertical filter.
//! 3. the remainder as `(Rv·Kw) × F` at rank `Rf`: right factor is the inverse
//!    transform.
//! 4. what is left, `(Rv·Kw) × Rf`, at rank `Rv`: left factor is the horizontal
//!    filter, right factor (scaled) the code generation layer.
//!
//! Stages 1-3 peel off orthonormal factors, so the squared reconstruction
//! error is the sum of the four stages' discarded energies.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::sqrt;
use crate::tensor::{full_svd, rel_frobenius_error, Matrix, SvdResult, Tensor4};
use crate::{Error, Result};

/// Retained ranks of a factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ranks {
    pub rc: usize,
    pub rv: usize,
    pub rf: usize,
}

impl Ranks {
    pub const fn new(rc: usize, rv: usize, rf: usize) -> Self {
        Self { rc, rv, rf }
    }

    /// Largest admissible ranks for a `C × Kh × Kw × F` tensor.
    pub fn full(dims: [usize; 4]) -> Self {
        let [c, kh, kw, f] = dims;
        let rv = (c * kh).min(kw * f);
        Self {
            rc: c,
            rv,
            rf: (rv * kw).min(f),
        }
    }

    pub fn check(&self, dims: [usize; 4]) -> Result<()> {
        let [c, kh, kw, f] = dims;
        let bound = |rank: usize, max: usize| {
            if rank == 0 || rank > max {
                Err(Error::RankOutOfRange { rank, max })
            } else {
                Ok(())
            }
        };
        bound(self.rc, c)?;
        bound(self.rv, (self.rc * kh).min(kw * f))?;
        bound(self.rf, (self.rv * kw).min(f))
    }

    /// Weight count of the five sub-layers of a `C × Kh × Kw × F` layer.
    pub fn param_count(&self, dims: [usize; 4]) -> usize {
        let [c, kh, kw, f] = dims;
        let Ranks { rc, rv, rf } = *self;
        c * rc + rc * kh * rv + rv * kw * rv + rv * rf + rf * f
    }
}

/// The five sub-layer tensors replacing one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLayer {
    /// `C × 1 × 1 × Rc`
    pub chi_c: Tensor4,
    /// `Rc × Kh × 1 × Rv`
    pub chi_v: Tensor4,
    /// `Rv × 1 × Kw × Rv`
    pub chi_h: Tensor4,
    /// `Rv × 1 × 1 × Rf`
    pub chi_g: Tensor4,
    /// `Rf × 1 × 1 × F`
    pub chi_i: Tensor4,
    pub ranks: Ranks,
    pub bias: Option<Vec<f64>>,
}

impl FactoredLayer {
    /// Dims of the layer this factorization replaces.
    pub fn original_dims(&self) -> [usize; 4] {
        let c = self.chi_c.dims()[0];
        let kh = self.chi_v.dims()[1];
        let kw = self.chi_h.dims()[2];
        let f = self.chi_i.dims()[3];
        [c, kh, kw, f]
    }

    pub fn param_count(&self) -> usize {
        self.ranks.param_count(self.original_dims())
    }

    /// Checks the sub-tensor shapes against each other and the ranks.
    pub fn validate(&self) -> Result<()> {
        let [c, kh, kw, f] = self.original_dims();
        let Ranks { rc, rv, rf } = self.ranks;
        let expect = [
            ("channel", self.chi_c.dims(), [c, 1, 1, rc]),
            ("vertical", self.chi_v.dims(), [rc, kh, 1, rv]),
            ("horizontal", self.chi_h.dims(), [rv, 1, kw, rv]),
            ("code generation", self.chi_g.dims(), [rv, 1, 1, rf]),
            ("inverse transform", self.chi_i.dims(), [rf, 1, 1, f]),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Shape(alloc::format!(
                    "{name} sub-layer is {got:?}, expected {want:?}"
                )));
            }
        }
        if let Some(bias) = &self.bias {
            if bias.len() != f {
                return Err(Error::Shape(alloc::format!(
                    "bias has {} entries for {f} features",
                    bias.len()
                )));
            }
        }
        Ok(())
    }
}

/// Rank-`rank` factors of `m`, zero-padded to `rank` components when the
/// matrix has fewer than `rank` singular values.
struct PaddedFactors {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
    tail: f64,
}

fn padded_svd(svd: &SvdResult, rank: usize) -> PaddedFactors {
    let keep = rank.min(svd.rank());
    let rows_u = svd.u.rows();
    let rows_v = svd.v.rows();
    let mut u = Matrix::zeros(rows_u, rank);
    let mut v = Matrix::zeros(rows_v, rank);
    let mut s = vec![0.0; rank];
    for k in 0..keep {
        s[k] = svd.s[k];
        for r in 0..rows_u {
            u.set(r, k, svd.u.get(r, k));
        }
        for r in 0..rows_v {
            v.set(r, k, svd.v.get(r, k));
        }
    }
    PaddedFactors {
        u,
        s,
        v,
        tail: svd.tail_energies()[keep],
    }
}

/// `diag(s) · vᵀ` as a rank × cols matrix.
fn scaled_vt(f: &PaddedFactors) -> Matrix {
    let rank = f.s.len();
    let cols = f.v.rows();
    let mut out = Matrix::zeros(rank, cols);
    for k in 0..rank {
        for c in 0..cols {
            out.set(k, c, f.s[k] * f.v.get(c, k));
        }
    }
    out
}

/// Squared discarded energy of each SVD stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageErrors {
    pub channel: f64,
    pub vertical: f64,
    pub inverse: f64,
    pub horizontal: f64,
}

impl StageErrors {
    pub fn total(&self) -> f64 {
        self.channel + self.vertical + self.inverse + self.horizontal
    }
}

/// Factorizes `chi` at the given ranks.
pub fn factorize_layer(chi: &Tensor4, ranks: Ranks) -> Result<FactoredLayer> {
    factorize_with_errors(chi, ranks).map(|(f, _)| f)
}

/// Like [`factorize_layer`], also returning the per-stage discarded energy.
///
/// A smaller channel rank occasionally leads the later stages to a better
/// subspace, so every channel rank up to `ranks.rc` is tried and the best
/// chain is zero-padded to the requested shape. This keeps the error
/// non-increasing in each rank.
pub fn factorize_with_errors(chi: &Tensor4, ranks: Ranks) -> Result<(FactoredLayer, StageErrors)> {
    let dims = chi.dims();
    ranks.check(dims)?;
    let [_, kh, kw, _] = dims;
    let mut best = chain(chi, ranks)?;
    for rc in (1..ranks.rc).rev() {
        let rv = ranks.rv.min(rc * kh);
        let rf = ranks.rf.min(rv * kw);
        let cand = chain(chi, Ranks { rc, rv, rf })?;
        if cand.1.total() < best.1.total() {
            best = cand;
        }
    }
    let (fl, errors) = best;
    Ok((pad_ranks(&fl, ranks)?, errors))
}

fn pad_tensor(t: &Tensor4, dims: [usize; 4]) -> Result<Tensor4> {
    if t.dims() == dims {
        return Ok(t.clone());
    }
    let [a, b, c, d] = t.dims();
    let mut out = Tensor4::zeros(dims)?;
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                for l in 0..d {
                    out.set(i, j, k, l, t.get(i, j, k, l));
                }
            }
        }
    }
    Ok(out)
}

/// Embeds a lower-rank factorization into the shapes of `ranks`.
fn pad_ranks(fl: &FactoredLayer, ranks: Ranks) -> Result<FactoredLayer> {
    let [c, kh, kw, f] = fl.original_dims();
    let Ranks { rc, rv, rf } = ranks;
    Ok(FactoredLayer {
        chi_c: pad_tensor(&fl.chi_c, [c, 1, 1, rc])?,
        chi_v: pad_tensor(&fl.chi_v, [rc, kh, 1, rv])?,
        chi_h: pad_tensor(&fl.chi_h, [rv, 1, kw, rv])?,
        chi_g: pad_tensor(&fl.chi_g, [rv, 1, 1, rf])?,
        chi_i: pad_tensor(&fl.chi_i, [rf, 1, 1, f])?,
        ranks,
        bias: fl.bias.clone(),
    })
}

/// One pass of the four chained SVDs at exactly `ranks`.
fn chain(chi: &Tensor4, ranks: Ranks) -> Result<(FactoredLayer, StageErrors)> {
    let dims = chi.dims();
    let [c, kh, kw, f] = dims;
    let Ranks { rc, rv, rf } = ranks;

    // Stage 1: C × (Kh·Kw·F). Row-major tensor memory is already this matrix.
    let m1 = Matrix::from_vec(c, kh * kw * f, chi.data().to_vec())?;
    let s1 = padded_svd(&full_svd(&m1)?, rc);
    let chi_c = Tensor4::from_vec([c, 1, 1, rc], s1.u.data().to_vec())?;
    // Remainder Rc × Kh × Kw × F, viewed as (Rc·Kh) × (Kw·F).
    let b = scaled_vt(&s1);

    let m2 = Matrix::from_vec(rc * kh, kw * f, b.into_data())?;
    let s2 = padded_svd(&full_svd(&m2)?, rv);
    let chi_v = Tensor4::from_vec([rc, kh, 1, rv], s2.u.data().to_vec())?;
    // Remainder Rv × Kw × F, viewed as (Rv·Kw) × F.
    let t = scaled_vt(&s2);

    let m3 = Matrix::from_vec(rv * kw, f, t.into_data())?;
    let s3 = padded_svd(&full_svd(&m3)?, rf);
    let chi_i = Tensor4::from_vec([rf, 1, 1, f], s3.v.transpose().into_data())?;
    // H = U · diag(S): (Rv·Kw) × Rf.
    let mut h = s3.u.clone();
    for r in 0..h.rows() {
        for k in 0..rf {
            h.set(r, k, h.get(r, k) * s3.s[k]);
        }
    }

    let s4 = padded_svd(&full_svd(&h)?, rv);
    let chi_h = Tensor4::from_vec([rv, 1, kw, rv], s4.u.data().to_vec())?;
    let chi_g = Tensor4::from_vec([rv, 1, 1, rf], scaled_vt(&s4).into_data())?;

    let errors = StageErrors {
        channel: s1.tail,
        vertical: s2.tail,
        inverse: s3.tail,
        horizontal: s4.tail,
    };
    let layer = FactoredLayer {
        chi_c,
        chi_v,
        chi_h,
        chi_g,
        chi_i,
        ranks,
        bias: None,
    };
    Ok((layer, errors))
}

/// The `C × Kh × Kw × F` tensor equivalent to running the five sub-layers in
/// sequence.
pub fn compose(fl: &FactoredLayer) -> Result<Tensor4> {
    fl.validate()?;
    let [c, kh, kw, f] = fl.original_dims();
    let Ranks { rc, rv, rf } = fl.ranks;

    // p1[c, kh, rv] = Σ_rc χc[c, rc] χv[rc, kh, rv]
    let mut p1 = vec![0.0; c * kh * rv];
    for ci in 0..c {
        for r in 0..rc {
            let a = fl.chi_c.get(ci, 0, 0, r);
            if a == 0.0 {
                continue;
            }
            for h in 0..kh {
                for v in 0..rv {
                    p1[(ci * kh + h) * rv + v] += a * fl.chi_v.get(r, h, 0, v);
                }
            }
        }
    }
    // p2[c, kh, kw, rv'] = Σ_rv p1[c, kh, rv] χh[rv, kw, rv']
    let mut p2 = vec![0.0; c * kh * kw * rv];
    for ck in 0..c * kh {
        for v in 0..rv {
            let a = p1[ck * rv + v];
            if a == 0.0 {
                continue;
            }
            for w in 0..kw {
                for v2 in 0..rv {
                    p2[(ck * kw + w) * rv + v2] += a * fl.chi_h.get(v, 0, w, v2);
                }
            }
        }
    }
    // gi[rv', f] = Σ_rf χg[rv', rf] χi[rf, f]
    let mut gi = vec![0.0; rv * f];
    for v in 0..rv {
        for r in 0..rf {
            let a = fl.chi_g.get(v, 0, 0, r);
            for o in 0..f {
                gi[v * f + o] += a * fl.chi_i.get(r, 0, 0, o);
            }
        }
    }
    let mut out = vec![0.0; c * kh * kw * f];
    for pos in 0..c * kh * kw {
        for v in 0..rv {
            let a = p2[pos * rv + v];
            if a == 0.0 {
                continue;
            }
            for o in 0..f {
                out[pos * f + o] += a * gi[v * f + o];
            }
        }
    }
    Tensor4::from_vec([c, kh, kw, f], out)
}

/// Feasible rank triples of a tensor, in canonical (lexicographic) order.
pub fn feasible_ranks(dims: [usize; 4]) -> impl Iterator<Item = Ranks> {
    let [c, kh, kw, f] = dims;
    (1..=c).flat_map(move |rc| {
        (1..=(rc * kh).min(kw * f))
            .flat_map(move |rv| (1..=(rv * kw).min(f)).map(move |rf| Ranks { rc, rv, rf }))
    })
}

/// Above this many feasible rank triples, [`select_ranks`] switches from the
/// exhaustive search to the per-stage budget heuristic.
pub const EXHAUSTIVE_RANK_LIMIT: usize = 4096;

/// Smallest-parameter ranks whose reconstruction error is at most
/// `target_error` (relative Frobenius).
///
/// Candidates are visited in order of parameter count (ties by lower error,
/// then lexicographically). A target of zero returns [`Ranks::full`].
pub fn select_ranks(chi: &Tensor4, target_error: f64) -> Result<Ranks> {
    if target_error.is_nan() || target_error < 0.0 {
        return Err(Error::Config(alloc::format!(
            "target error {target_error} must be non-negative"
        )));
    }
    let dims = chi.dims();
    if target_error == 0.0 {
        return Ok(Ranks::full(dims));
    }
    if chi.frobenius_norm() == 0.0 {
        return Ok(Ranks::new(1, 1, 1));
    }
    let count = feasible_ranks(dims).take(EXHAUSTIVE_RANK_LIMIT + 1).count();
    if count <= EXHAUSTIVE_RANK_LIMIT {
        select_exhaustive(chi, target_error)
    } else {
        select_by_budget(chi, target_error)
    }
}

fn measured_error(chi: &Tensor4, ranks: Ranks) -> Result<f64> {
    let fl = factorize_layer(chi, ranks)?;
    rel_frobenius_error(chi, &compose(&fl)?)
}

fn select_exhaustive(chi: &Tensor4, target: f64) -> Result<Ranks> {
    let dims = chi.dims();
    let mut candidates: Vec<(usize, Ranks)> = feasible_ranks(dims)
        .map(|r| (r.param_count(dims), r))
        .collect();
    candidates.sort();
    let mut i = 0;
    while i < candidates.len() {
        let params = candidates[i].0;
        let mut best: Option<(f64, Ranks)> = None;
        while i < candidates.len() && candidates[i].0 == params {
            let ranks = candidates[i].1;
            let err = measured_error(chi, ranks)?;
            if err <= target && best.is_none_or(|(e, _)| err < e) {
                best = Some((err, ranks));
            }
            i += 1;
        }
        if let Some((_, ranks)) = best {
            return Ok(ranks);
        }
    }
    Ok(Ranks::full(dims))
}

/// Equal squared-error budget per SVD stage, then unit-step refinement on the
/// measured error.
fn select_by_budget(chi: &Tensor4, target: f64) -> Result<Ranks> {
    let dims = chi.dims();
    let [c, kh, kw, f] = dims;
    let norm_sq = chi.frobenius_norm() * chi.frobenius_norm();
    let budget = target * target * norm_sq / 4.0;
    let min_rank = |tails: &[f64], max: usize| {
        (1..=max)
            .find(|&r| tails[r.min(tails.len() - 1)] <= budget)
            .unwrap_or(max)
    };

    let m1 = Matrix::from_vec(c, kh * kw * f, chi.data().to_vec())?;
    let svd1 = full_svd(&m1)?;
    let rc = min_rank(&svd1.tail_energies(), c);
    let s1 = padded_svd(&svd1, rc);
    let m2 = Matrix::from_vec(rc * kh, kw * f, scaled_vt(&s1).into_data())?;
    let svd2 = full_svd(&m2)?;
    let rv = min_rank(&svd2.tail_energies(), (rc * kh).min(kw * f));
    let s2 = padded_svd(&svd2, rv);
    let m3 = Matrix::from_vec(rv * kw, f, scaled_vt(&s2).into_data())?;
    let svd3 = full_svd(&m3)?;
    let rf = min_rank(&svd3.tail_energies(), (rv * kw).min(f));

    let mut ranks = Ranks { rc, rv, rf };
    let mut err = measured_error(chi, ranks)?;
    let full = Ranks::full(dims);

    // Loosen: grow the rank with the best error reduction until the bound holds.
    while err > target && ranks != full {
        let mut best: Option<(f64, Ranks)> = None;
        for step in [
            Ranks {
                rc: ranks.rc + 1,
                ..ranks
            },
            Ranks {
                rv: ranks.rv + 1,
                ..ranks
            },
            Ranks {
                rf: ranks.rf + 1,
                ..ranks
            },
        ] {
            if step.check(dims).is_err() {
                continue;
            }
            let e = measured_error(chi, step)?;
            if best.is_none_or(|(b, _)| e < b) {
                best = Some((e, step));
            }
        }
        match best {
            Some((e, step)) => {
                ranks = step;
                err = e;
            }
            None => break,
        }
    }
    // Tighten: drop whichever unit step saves the most parameters.
    loop {
        let mut best: Option<(usize, Ranks)> = None;
        for step in [
            Ranks {
                rc: ranks.rc.saturating_sub(1),
                ..ranks
            },
            Ranks {
                rv: ranks.rv.saturating_sub(1),
                ..ranks
            },
            Ranks {
                rf: ranks.rf.saturating_sub(1),
                ..ranks
            },
        ] {
            if step == ranks || step.check(dims).is_err() {
                continue;
            }
            if measured_error(chi, step)? <= target {
                let p = step.param_count(dims);
                if best.is_none_or(|(b, _)| p < b) {
                    best = Some((p, step));
                }
            }
        }
        match best {
            Some((_, step)) => ranks = step,
            None => break,
        }
    }
    if err > target {
        return Ok(full);
    }
    Ok(ranks)
}

/// Relative error predicted from the per-stage discarded energies.
pub fn predicted_error(chi: &Tensor4, errors: &StageErrors) -> Result<f64> {
    let norm = chi.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(sqrt(errors.total()) / norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_layer() {
        let chi = Tensor4::from_vec([1, 1, 1, 1], vec![-2.5]).unwrap();
        let fl = factorize_layer(&chi, Ranks::new(1, 1, 1)).unwrap();
        assert_eq!(compose(&fl).unwrap().data(), &[-2.5]);
        assert_eq!(fl.param_count(), 5);
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(Ranks::new(1, 1, 1).param_count([1, 3, 3, 1]), 9);
        assert_eq!(Ranks::new(1, 2, 4).param_count([1, 28, 28, 10]), 217);
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let chi = Tensor4::zeros([2, 3, 3, 4]).unwrap();
        assert_eq!(
            factorize_layer(&chi, Ranks::new(3, 1, 1)).unwrap_err(),
            Error::RankOutOfRange { rank: 3, max: 2 }
        );
        assert_eq!(
            factorize_layer(&chi, Ranks::new(1, 4, 1)).unwrap_err(),
            Error::RankOutOfRange { rank: 4, max: 3 }
        );
        assert_eq!(
            factorize_layer(&chi, Ranks::new(1, 1, 4)).unwrap_err(),
            Error::RankOutOfRange { rank: 4, max: 3 }
        );
    }

    #[test]
    fn identity_chain() {
        // Rc = C, Rv = 1, Kh = Kw = 1, Rf = F with identity sub-layers.
        let eye = |n: usize| {
            Tensor4::from_fn([n, 1, 1, n], |a, _, _, b| if a == b { 1.0 } else { 0.0 }).unwrap()
        };
        let fl = FactoredLayer {
            chi_c: Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap(),
            chi_v: Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap(),
            chi_h: Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap(),
            chi_g: Tensor4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap(),
            chi_i: eye(1),
            ranks: Ranks::new(1, 1, 1),
            bias: None,
        };
        assert_eq!(compose(&fl).unwrap(), eye(1));
    }

    #[test]
    fn compose_is_linear_in_channel_filter() {
        let chi = Tensor4::from_fn([2, 2, 2, 2], |a, b, c, d| {
            (a + 2 * b) as f64 - (c * d) as f64 * 0.5
        })
        .unwrap();
        let mut fl = factorize_layer(&chi, Ranks::new(1, 1, 1)).unwrap();
        let base = compose(&fl).unwrap();
        fl.chi_c = fl.chi_c.scaled(2.0);
        let doubled = compose(&fl).unwrap();
        for (a, b) in base.data().iter().zip(doubled.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_target_is_full_rank() {
        let chi = Tensor4::from_fn([2, 3, 3, 4], |a, b, c, d| {
            ((a * 7 + b * 5 + c * 3 + d) % 11) as f64
        })
        .unwrap();
        assert_eq!(select_ranks(&chi, 0.0).unwrap(), Ranks::new(2, 6, 4));
        assert!(select_ranks(&chi, -0.1).is_err());
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let chi = Tensor4::from_fn([1, 2, 2, 1], |_, a, b, _| (a + b) as f64).unwrap();
        let mut fl = factorize_layer(&chi, Ranks::new(1, 1, 1)).unwrap();
        fl.bias = Some(vec![0.0; 3]);
        assert!(matches!(fl.validate(), Err(Error::Shape(_))));
        fl.bias = None;
        fl.chi_g = Tensor4::zeros([2, 1, 1, 1]).unwrap();
        assert!(matches!(compose(&fl), Err(Error::Shape(_))));
    }
}
