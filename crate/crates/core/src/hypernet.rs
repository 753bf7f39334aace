//! Per-site offset hypernetworks. Each one maps a learnable scalar through two
//! factor layers to vectors `a` (length `dim_r`) and `b` (length `dim_c`), then
//! applies learnable row and column transforms:
//! `dw = R * (a^T b) * C^T`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Matrix, Tape, Var};
use crate::unet::{AttentionSite, ParamStore, Partition, UNetModel};

pub const LAMBDA_TRAIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttributeKind {
    Shape,
    Appearance,
    Style,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 3] = [AttributeKind::Shape, AttributeKind::Appearance, AttributeKind::Style];

    pub fn word(self) -> &'static str {
        match self {
            AttributeKind::Shape => "shape",
            AttributeKind::Appearance => "appearance",
            AttributeKind::Style => "style",
        }
    }

    pub fn placeholder(self) -> &'static str {
        match self {
            AttributeKind::Shape => "*m",
            AttributeKind::Appearance => "*a",
            AttributeKind::Style => "*s",
        }
    }

    pub fn partition(self) -> Partition {
        match self {
            AttributeKind::Shape => Partition::Encoder,
            AttributeKind::Appearance | AttributeKind::Style => Partition::Decoder,
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.word() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown attribute kind `{s}`")))
    }
}

/// Attention sites targeted for an attribute. Bottleneck sites are never included.
pub fn select_partition(attribute: AttributeKind, model: &UNetModel) -> Result<Vec<AttentionSite>> {
    let partition = attribute.partition();
    let sites = model.sites_in(partition);
    if sites.is_empty() {
        return Err(Error::Config(format!("model has no attention sites in the {partition} partition")));
    }
    Ok(sites)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetHyperNet {
    pub site: AttentionSite,
    /// `1 x 1`
    pub cons: Matrix,
    /// Row factor layer, `1 x dim_r` weight and bias.
    pub row_w: Matrix,
    pub row_b: Matrix,
    /// Column factor layer, `1 x dim_c` weight and bias.
    pub col_w: Matrix,
    pub col_b: Matrix,
    /// `dim_r x dim_r`
    pub row_t: Matrix,
    /// `dim_c x dim_c`
    pub col_t: Matrix,
}

/// Names of the hypernetwork tensors, in the order used by [`OffsetHyperNet::tensors`].
pub const HYPERNET_TENSORS: [&str; 7] = ["cons", "row_w", "row_b", "col_w", "col_b", "row_t", "col_t"];

impl OffsetHyperNet {
    /// Fresh hypernetwork: `cons = 1`, identity transforms, random row factor
    /// weights and an all-zero column factor layer, so `dw` starts at zero.
    pub fn new(site: AttentionSite, rng: &mut impl Rng) -> Self {
        let (r, c) = (site.dim_r, site.dim_c);
        let std = 1.0 / (r as f64).sqrt();
        Self {
            cons: Matrix::from_elem((1, 1), 1.0),
            row_w: Matrix::from_shape_fn((1, r), |_| rng.sample::<f64, _>(StandardNormal) * std),
            row_b: Matrix::zeros((1, r)),
            col_w: Matrix::zeros((1, c)),
            col_b: Matrix::zeros((1, c)),
            row_t: Matrix::eye(r),
            col_t: Matrix::eye(c),
            site,
        }
    }

    pub fn tensors(&self) -> [&Matrix; 7] {
        [
            &self.cons, &self.row_w, &self.row_b, &self.col_w, &self.col_b, &self.row_t, &self.col_t,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 7] {
        [
            &mut self.cons,
            &mut self.row_w,
            &mut self.row_b,
            &mut self.col_w,
            &mut self.col_b,
            &mut self.row_t,
            &mut self.col_t,
        ]
    }

    fn expected_shapes(&self) -> [(usize, usize); 7] {
        let (r, c) = (self.site.dim_r, self.site.dim_c);
        [(1, 1), (1, r), (1, r), (1, c), (1, c), (r, r), (c, c)]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn factors(&self) -> (Matrix, Matrix) {
        let k = self.cons[[0, 0]];
        (&self.row_w * k + &self.row_b, &self.col_w * k + &self.col_b)
    }

    pub fn validate(&self) -> Result<()> {
        for ((name, m), shape) in HYPERNET_TENSORS.iter().zip(self.tensors()).zip(self.expected_shapes()) {
            if m.dim() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "hypernetwork `{}` tensor {name} has shape {:?}, expected {shape:?}",
                    self.site.id,
                    m.dim()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value in hypernetwork `{}` tensor {name}",
                    self.site.id
                )));
            }
        }
        Ok(())
    }

    /// `R * (a^T b) * C^T`.
    pub fn predict_offset(&self) -> Result<Matrix> {
        self.validate()?;
        let (a, b) = self.factors();
        let outer = a.t().dot(&b);
        Ok(self.row_t.dot(&outer).dot(&self.col_t.t()))
    }

    /// Places all tensors on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> HyperNetVars {
        let mut leaf = |m: &Matrix| tape.param(m.clone());
        HyperNetVars {
            cons: leaf(&self.cons),
            row_w: leaf(&self.row_w),
            row_b: leaf(&self.row_b),
            col_w: leaf(&self.col_w),
            col_b: leaf(&self.col_b),
            row_t: leaf(&self.row_t),
            col_t: leaf(&self.col_t),
        }
    }
}

/// Tape handles for one hypernetwork's tensors.
#[derive(Clone, Copy, Debug)]
pub struct HyperNetVars {
    pub cons: Var,
    pub row_w: Var,
    pub row_b: Var,
    pub col_w: Var,
    pub col_b: Var,
    pub row_t: Var,
    pub col_t: Var,
}

impl HyperNetVars {
    pub fn all(&self) -> [Var; 7] {
        [
            self.cons, self.row_w, self.row_b, self.col_w, self.col_b, self.row_t, self.col_t,
        ]
    }

    /// Records `dw` on the tape.
    pub fn offset(&self, tape: &mut Tape) -> Var {
        let a = tape.matmul(self.cons, self.row_w);
        let a = tape.add(a, self.row_b);
        let b = tape.matmul(self.cons, self.col_w);
        let b = tape.add(b, self.col_b);
        let outer = tape.matmul_tn(a, b);
        let left = tape.matmul(self.row_t, outer);
        tape.matmul_nt(left, self.col_t)
    }
}

/// One hypernetwork per site, keyed by site id.
pub fn init_hypernets(sites: &[AttentionSite], seed: u64) -> Result<BTreeMap<String, OffsetHyperNet>> {
    if sites.is_empty() {
        return Err(Error::Config("no attention sites to attach hypernetworks to".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for site in sites {
        if out.contains_key(&site.id) {
            return Err(Error::Parameter(format!("duplicate site id `{}`", site.id)));
        }
        out.insert(site.id.clone(), OffsetHyperNet::new(site.clone(), &mut rng));
    }
    Ok(out)
}

/// Flattens hypernetworks into `"{site}/{tensor}"` named arrays.
pub fn hypernets_to_params(nets: &BTreeMap<String, OffsetHyperNet>) -> ParamStore {
    let mut store = ParamStore::new();
    for (id, net) in nets {
        for (name, m) in HYPERNET_TENSORS.iter().zip(net.tensors()) {
            store.insert(format!("{id}/{name}"), m.clone());
        }
    }
    store
}

pub fn hypernets_from_params(
    sites: &[AttentionSite],
    store: &ParamStore,
) -> Result<BTreeMap<String, OffsetHyperNet>> {
    let mut out = BTreeMap::new();
    let mut used = BTreeSet::new();
    for site in sites {
        let mut net = OffsetHyperNet::new(site.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        for (name, slot) in HYPERNET_TENSORS.iter().zip(net.tensors_mut()) {
            let key = format!("{}/{name}", site.id);
            let m = store
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing hypernetwork tensor `{key}`")))?;
            *slot = m.clone();
            used.insert(key);
        }
        net.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.insert(site.id.clone(), net);
    }
    if let Some(extra) = store.names().find(|n| !used.contains(*n)) {
        return Err(Error::Checkpoint(format!("unexpected hypernetwork tensor `{extra}`")));
    }
    Ok(out)
}

/// Predicted or directly trained weight offsets for one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetBundle {
    pub partition: Partition,
    pub deltas: BTreeMap<String, Matrix>,
    pub lambda_train: f64,
}

impl OffsetBundle {
    pub fn empty(partition: Partition) -> Self {
        Self {
            partition,
            deltas: BTreeMap::new(),
            lambda_train: LAMBDA_TRAIN,
        }
    }

    pub fn from_hypernets(partition: Partition, nets: &BTreeMap<String, OffsetHyperNet>) -> Result<Self> {
        let mut bundle = Self::empty(partition);
        for (id, net) in nets {
            bundle.deltas.insert(id.clone(), net.predict_offset()?);
        }
        Ok(bundle)
    }

    /// Checks that every offset targets a site of `model` in this bundle's
    /// partition with the right shape.
    pub fn validate(&self, model: &UNetModel) -> Result<()> {
        for (id, dw) in &self.deltas {
            let site = model.site(id).ok_or_else(|| Error::UnknownSite(id.clone()))?;
            if site.partition != self.partition {
                return Err(Error::Parameter(format!(
                    "site `{id}` is in the {} partition, bundle targets {}",
                    site.partition, self.partition
                )));
            }
            if dw.dim() != (site.dim_r, site.dim_c) {
                return Err(Error::ShapeMismatch(format!(
                    "offset for `{id}` is {:?}, site is {:?}",
                    dw.dim(),
                    (site.dim_r, site.dim_c)
                )));
            }
        }
        Ok(())
    }
}

/// `w + lambda * dw`, leaving `w` untouched.
pub fn apply_offsets(w: &Matrix, dw: &Matrix, lambda: f64) -> Result<Matrix> {
    if w.dim() != dw.dim() {
        return Err(Error::ShapeMismatch(format!("weight {:?} vs offset {:?}", w.dim(), dw.dim())));
    }
    if !lambda.is_finite() {
        return Err(Error::Numeric(format!("lambda must be finite, got {lambda}")));
    }
    Ok(w + &(dw * lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{AttentionKind, Role, UNetConfig};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn site(r: usize, c: usize) -> AttentionSite {
        AttentionSite {
            id: "s".into(),
            partition: Partition::Encoder,
            role: Role::Query,
            kind: AttentionKind::SelfAttention,
            dim_r: r,
            dim_c: c,
        }
    }

    #[test]
    fn partition_selection() {
        let model = UNetModel::new(UNetConfig::tiny(), 0).unwrap();
        let shape = select_partition(AttributeKind::Shape, &model).unwrap();
        assert!(shape.iter().all(|s| s.partition == Partition::Encoder));
        assert_eq!(shape.len(), 12);
        let app = select_partition(AttributeKind::Appearance, &model).unwrap();
        assert!(app.iter().all(|s| s.partition == Partition::Decoder));
        assert_eq!(app, select_partition(AttributeKind::Style, &model).unwrap());
    }

    #[test]
    fn fresh_init_gives_zero_offsets_of_site_shape() {
        let nets = init_hypernets(&[site(4, 6)], 9).unwrap();
        let dw = nets["s"].predict_offset().unwrap();
        assert_eq!(dw.dim(), (4, 6));
        assert!(dw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded_and_rejects_duplicates() {
        let sites = [site(3, 3)];
        assert_eq!(init_hypernets(&sites, 1).unwrap(), init_hypernets(&sites, 1).unwrap());
        assert!(matches!(init_hypernets(&[site(2, 2), site(2, 2)], 1), Err(Error::Parameter(_))));
        assert!(init_hypernets(&[], 1).is_err());
    }

    #[test]
    fn outer_product_example() {
        let mut net = OffsetHyperNet::new(site(2, 3), &mut ChaCha8Rng::seed_from_u64(0));
        net.row_w = array![[1.0, 2.0]];
        net.col_w = array![[3.0, 0.0, 1.0]];
        assert_eq!(net.predict_offset().unwrap(), array![[3.0, 0.0, 1.0], [6.0, 0.0, 2.0]]);
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut net = OffsetHyperNet::new(site(2, 3), &mut ChaCha8Rng::seed_from_u64(0));
        net.row_t[[1, 0]] = f64::INFINITY;
        assert!(matches!(net.predict_offset(), Err(Error::Numeric(_))));
    }

    #[test]
    fn apply_examples() {
        let w = Matrix::eye(2);
        let dw = Matrix::from_elem((2, 2), 1.0);
        assert_eq!(apply_offsets(&w, &dw, 0.0).unwrap(), w);
        assert_eq!(apply_offsets(&w, &dw, 0.5).unwrap(), array![[1.5, 0.5], [0.5, 1.5]]);
        assert!(apply_offsets(&w, &Matrix::zeros((2, 3)), 1.0).is_err());
        assert!(apply_offsets(&w, &dw, f64::NAN).is_err());
    }

    #[test]
    fn graph_offset_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = OffsetHyperNet::new(site(3, 5), &mut rng);
        for m in net.tensors_mut() {
            m.mapv_inplace(|v| v + rng.gen_range(-0.5..0.5));
        }
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let dw = vars.offset(&mut tape);
        let plain = net.predict_offset().unwrap();
        for (a, b) in tape.value(dw).iter().zip(plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip() {
        let model = UNetModel::new(UNetConfig::tiny(), 0).unwrap();
        let sites = select_partition(AttributeKind::Shape, &model).unwrap();
        let nets = init_hypernets(&sites, 3).unwrap();
        let store = hypernets_to_params(&nets);
        assert_eq!(hypernets_from_params(&sites, &store).unwrap(), nets);
        let other = select_partition(AttributeKind::Style, &model).unwrap();
        assert!(hypernets_from_params(&other, &store).is_err());
    }

    #[test]
    fn bundle_validation() {
        let model = UNetModel::new(UNetConfig::tiny(), 0).unwrap();
        let sites = select_partition(AttributeKind::Shape, &model).unwrap();
        let nets = init_hypernets(&sites, 3).unwrap();
        let bundle = OffsetBundle::from_hypernets(Partition::Encoder, &nets).unwrap();
        bundle.validate(&model).unwrap();
        let mut wrong = bundle.clone();
        wrong.partition = Partition::Decoder;
        assert!(wrong.validate(&model).is_err());
        let mut unknown = bundle;
        unknown.deltas.insert("nope".into(), Matrix::zeros((1, 1)));
        assert!(matches!(unknown.validate(&model), Err(Error::UnknownSite(_))));
    }

    proptest! {
        #[test]
        fn offsets_are_rank_one(values in proptest::collection::vec(-2.0f64..2.0, 64), r in 2usize..6, c in 2usize..7) {
            let mut net = OffsetHyperNet::new(site(r, c), &mut ChaCha8Rng::seed_from_u64(0));
            let mut it = values.iter().cycle();
            for m in net.tensors_mut() {
                m.mapv_inplace(|v| v + it.next().unwrap());
            }
            let dw = net.predict_offset().unwrap();
            let m = nalgebra::DMatrix::from_fn(dw.nrows(), dw.ncols(), |i, j| dw[[i, j]]);
            let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            prop_assume!(s[0] > 1e-8);
            prop_assert!(s[1] / s[0] < 1e-6, "sigma ratio {}", s[1] / s[0]);
        }

        #[test]
        fn apply_is_linear_in_lambda(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = Matrix::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
            let dw = Matrix::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
            let lhs = apply_offsets(&w, &dw, a).unwrap() + apply_offsets(&Matrix::zeros((3, 4)), &dw, b).unwrap();
            let rhs = apply_offsets(&w, &dw, a + b).unwrap();
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
