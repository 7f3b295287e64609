//! W+ latent algebra: linear attribute edits, identity interpolation and
//! global direction extraction from paired latents.
//!
//! All operations are pure and allocate fresh outputs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::order_invariant_sum;
use crate::{round_f32, Error, Result};

/// Shape of a W+ code: one `dims`-wide style vector per generator layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WPlusShape {
    pub layers: usize,
    pub dims: usize,
}

impl WPlusShape {
    /// 18 × 512, the W+ layout of a 1024² StyleGAN2 face generator.
    pub const FFHQ_1024: WPlusShape = WPlusShape {
        layers: 18,
        dims: 512,
    };

    pub fn new(layers: usize, dims: usize) -> Result<Self> {
        if layers == 0 || dims == 0 {
            return Err(Error::invalid(format!(
                "W+ shape must be at least 1×1, got {layers}×{dims}"
            )));
        }
        Ok(Self { layers, dims })
    }

    pub fn numel(&self) -> usize {
        self.layers * self.dims
    }

    pub fn as_array(&self) -> [usize; 2] {
        [self.layers, self.dims]
    }

    fn ensure_eq(&self, other: WPlusShape, context: &str) -> Result<()> {
        if *self != other {
            return Err(Error::dim(context, &self.as_array(), &other.as_array()));
        }
        Ok(())
    }
}

impl Default for WPlusShape {
    fn default() -> Self {
        Self::FFHQ_1024
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Encoded,
    Synthetic,
    Edited,
    Interpolated,
}

/// A subject's W+ code.
#[derive(Clone, Debug, PartialEq)]
pub struct WPlusLatent {
    shape: WPlusShape,
    styles: Vec<f64>,
    source: SourceTag,
}

impl WPlusLatent {
    pub fn new(shape: WPlusShape, styles: Vec<f64>, source: SourceTag) -> Result<Self> {
        if styles.len() != shape.numel() {
            return Err(Error::dim(
                "W+ styles",
                &shape.as_array(),
                &[styles.len()],
            ));
        }
        if let Some(pos) = styles.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "W+ entry ({}, {}) is not finite",
                pos / shape.dims,
                pos % shape.dims
            )));
        }
        Ok(Self {
            shape,
            styles,
            source,
        })
    }

    pub fn zeros(shape: WPlusShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: WPlusShape, value: f64) -> Self {
        Self {
            shape,
            styles: alloc::vec![value; shape.numel()],
            source: SourceTag::Synthetic,
        }
    }

    pub fn from_fn(shape: WPlusShape, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let styles = (0..shape.numel())
            .map(|k| f(k / shape.dims, k % shape.dims))
            .collect();
        Self::new(shape, styles, SourceTag::Synthetic)
    }

    pub fn shape(&self) -> WPlusShape {
        self.shape
    }

    /// Row-major `layers × dims` entries.
    pub fn styles(&self) -> &[f64] {
        &self.styles
    }

    pub fn get(&self, layer: usize, dim: usize) -> f64 {
        self.styles[layer * self.shape.dims + dim]
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        &self.styles[layer * self.shape.dims..(layer + 1) * self.shape.dims]
    }

    pub fn source_tag(&self) -> SourceTag {
        self.source
    }

    pub fn with_source_tag(mut self, source: SourceTag) -> Self {
        self.source = source;
        self
    }

    pub fn to_f32_precision(&self) -> Self {
        Self {
            shape: self.shape,
            styles: self.styles.iter().map(|&x| round_f32(x)).collect(),
            source: self.source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PairedAverage,
    External,
}

/// A global linear attribute direction in W+.
///
/// Deltas are kept unnormalized; callers pick the strength.
#[derive(Clone, Debug, PartialEq)]
pub struct EditDirection {
    name: String,
    shape: WPlusShape,
    delta: Vec<f64>,
    provenance: Provenance,
    num_pairs: usize,
}

impl EditDirection {
    pub fn new(
        name: impl Into<String>,
        shape: WPlusShape,
        delta: Vec<f64>,
        provenance: Provenance,
        num_pairs: usize,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("direction name is empty"));
        }
        if delta.len() != shape.numel() {
            return Err(Error::dim(
                format!("direction '{name}'"),
                &shape.as_array(),
                &[delta.len()],
            ));
        }
        if delta.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("direction '{name}' has non-finite entries")));
        }
        if provenance == Provenance::PairedAverage && num_pairs == 0 {
            return Err(Error::invalid(format!(
                "direction '{name}' is a paired average over zero pairs"
            )));
        }
        Ok(Self {
            name,
            shape,
            delta,
            provenance,
            num_pairs,
        })
    }

    pub fn external(name: impl Into<String>, shape: WPlusShape, delta: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, delta, Provenance::External, 0)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> WPlusShape {
        self.shape
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn num_pairs(&self) -> usize {
        self.num_pairs
    }

    pub fn to_f32_precision(&self) -> Self {
        Self {
            delta: self.delta.iter().map(|&x| round_f32(x)).collect(),
            ..self.clone()
        }
    }
}

/// A weighted list of named directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    entries: Vec<(String, f64)>,
}

impl EditRequest {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("edit request has no directions"));
        }
        if let Some((name, beta)) = entries.iter().find(|(_, b)| !b.is_finite()) {
            return Err(Error::invalid(format!("edit strength for '{name}' is {beta}")));
        }
        Ok(Self { entries })
    }

    pub fn single(name: impl Into<String>, beta: f64) -> Result<Self> {
        Self::new(alloc::vec![(name.into(), beta)])
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|(_, b)| *b == 0.0)
    }
}

/// Named directions sharing one W+ shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DirectionCatalog {
    directions: BTreeMap<String, EditDirection>,
}

impl DirectionCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a direction, rounding it to `f32` precision so
    /// the catalog round-trips through its on-disk format unchanged.
    pub fn insert(&mut self, direction: EditDirection) -> Result<()> {
        if let Some(existing) = self.directions.values().next() {
            existing
                .shape
                .ensure_eq(direction.shape, "direction catalog")?;
        }
        self.directions
            .insert(direction.name.clone(), direction.to_f32_precision());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&EditDirection> {
        self.directions.get(name).ok_or_else(|| Error::Lookup {
            kind: "direction",
            name: name.into(),
        })
    }

    pub fn remove(&mut self, name: &str) -> Option<EditDirection> {
        self.directions.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.directions.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EditDirection> {
        self.directions.values()
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// `ŵ = w + β·d`.
pub fn edit_latent(w: &WPlusLatent, d: &EditDirection, beta: f64) -> Result<WPlusLatent> {
    if !beta.is_finite() {
        return Err(Error::invalid(format!("edit strength is {beta}")));
    }
    w.shape.ensure_eq(d.shape, "edit_latent")?;
    let styles = w
        .styles
        .iter()
        .zip(&d.delta)
        .map(|(&wv, &dv)| wv + beta * dv)
        .collect();
    WPlusLatent::new(w.shape, styles, SourceTag::Edited)
}

/// `Σ_k β_k d_k`, named by joining the component names with `+`.
pub fn combine_directions(edits: &EditRequest, catalog: &DirectionCatalog) -> Result<EditDirection> {
    let mut parts = edits.entries.iter();
    let (first_name, first_beta) = parts.next().expect("EditRequest is non-empty");
    let first = catalog.get(first_name)?;
    let shape = first.shape;
    let mut delta: Vec<f64> = first.delta.iter().map(|&x| first_beta * x).collect();
    let mut name = first_name.clone();
    for (n, beta) in parts {
        let d = catalog.get(n)?;
        shape.ensure_eq(d.shape, "combine_directions")?;
        for (acc, &x) in delta.iter_mut().zip(&d.delta) {
            *acc += beta * x;
        }
        name.push('+');
        name.push_str(n);
    }
    EditDirection::new(name, shape, delta, Provenance::External, 0)
}

/// `(1 − λ)·w_a + λ·w_b` for `λ ∈ [0, 1]`.
pub fn interpolate(w_a: &WPlusLatent, w_b: &WPlusLatent, lam: f64) -> Result<WPlusLatent> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::invalid(format!(
            "interpolation weight {lam} outside [0, 1]"
        )));
    }
    w_a.shape.ensure_eq(w_b.shape, "interpolate")?;
    let styles = w_a
        .styles
        .iter()
        .zip(&w_b.styles)
        .map(|(&a, &b)| (1.0 - lam) * a + lam * b)
        .collect();
    WPlusLatent::new(w_a.shape, styles, SourceTag::Interpolated)
}

/// Mean of `w_after − w_before` over the pairs.
///
/// Each entry of the mean is summed in sorted order, which makes the result
/// independent of the order of `pairs`.
pub fn extract_direction(
    pairs: &[(WPlusLatent, WPlusLatent)],
    name: impl Into<String>,
) -> Result<EditDirection> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::invalid("direction extraction needs at least one pair"));
    };
    let shape = first.shape;
    for (after, before) in pairs {
        shape.ensure_eq(after.shape, "extract_direction")?;
        shape.ensure_eq(before.shape, "extract_direction")?;
    }
    let n = pairs.len() as f64;
    let mut column = Vec::with_capacity(pairs.len());
    let delta = (0..shape.numel())
        .map(|k| {
            column.clear();
            column.extend(pairs.iter().map(|(a, b)| a.styles[k] - b.styles[k]));
            order_invariant_sum(&mut column) / n
        })
        .collect();
    EditDirection::new(name, shape, delta, Provenance::PairedAverage, pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn shape23() -> WPlusShape {
        WPlusShape::new(2, 3).unwrap()
    }

    #[test]
    fn zero_plus_ones_times_two_point_five() {
        let w = WPlusLatent::zeros(shape23());
        let d = EditDirection::external("ones", shape23(), vec![1.0; 6]).unwrap();
        let e = edit_latent(&w, &d, 2.5).unwrap();
        assert!(e.styles().iter().all(|&x| x == 2.5));
        assert_eq!(e.source_tag(), SourceTag::Edited);
    }

    #[test]
    fn non_finite_beta_is_rejected() {
        let w = WPlusLatent::zeros(shape23());
        let d = EditDirection::external("ones", shape23(), vec![1.0; 6]).unwrap();
        assert!(matches!(edit_latent(&w, &d, f64::NAN), Err(Error::Validation(_))));
        assert!(matches!(
            edit_latent(&w, &d, f64::INFINITY),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let w = WPlusLatent::zeros(shape23());
        let d = EditDirection::external("x", WPlusShape::new(3, 2).unwrap(), vec![0.0; 6]).unwrap();
        assert!(matches!(edit_latent(&w, &d, 1.0), Err(Error::Dimension { .. })));
        let other = WPlusLatent::zeros(WPlusShape::new(1, 6).unwrap());
        assert!(matches!(interpolate(&w, &other, 0.5), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cancellation_gives_zero_delta() {
        let mut catalog = DirectionCatalog::new();
        catalog
            .insert(EditDirection::external("d", shape23(), vec![0.5, -1.0, 2.0, 3.0, 0.25, 1.0]).unwrap())
            .unwrap();
        let req = EditRequest::new(vec![("d".into(), 1.0), ("d".into(), -1.0)]).unwrap();
        let c = combine_directions(&req, &catalog).unwrap();
        assert!(c.delta().iter().all(|&x| x == 0.0));
        assert_eq!(c.name(), "d+d");
        assert_eq!(c.provenance(), Provenance::External);
    }

    #[test]
    fn unknown_direction_is_lookup_error() {
        let catalog = DirectionCatalog::new();
        let req = EditRequest::single("smile", 1.0).unwrap();
        assert!(matches!(
            combine_directions(&req, &catalog),
            Err(Error::Lookup { kind: "direction", .. })
        ));
    }

    #[test]
    fn interpolation_midpoint_and_range() {
        let a = WPlusLatent::zeros(shape23());
        let b = WPlusLatent::filled(shape23(), 2.0);
        let m = interpolate(&a, &b, 0.5).unwrap();
        assert!(m.styles().iter().all(|&x| x == 1.0));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().styles(), a.styles());
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().styles(), b.styles());
        assert!(matches!(interpolate(&a, &b, -0.1), Err(Error::Validation(_))));
        assert!(matches!(interpolate(&a, &b, 1.5), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_pairs_rejected() {
        assert!(matches!(
            extract_direction(&[], "smile"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn single_pair_gives_its_difference() {
        let before = WPlusLatent::from_fn(shape23(), |i, j| (i * 3 + j) as f64).unwrap();
        let delta = [0.5, -0.25, 1.0, 2.0, 0.0, -3.0];
        let after =
            WPlusLatent::from_fn(shape23(), |i, j| before.get(i, j) + delta[i * 3 + j]).unwrap();
        let d = extract_direction(&[(after, before)], "x").unwrap();
        assert_eq!(d.delta(), &delta);
        assert_eq!(d.num_pairs(), 1);
        assert_eq!(d.provenance(), Provenance::PairedAverage);
    }

    #[test]
    fn latent_rejects_nan() {
        let mut v = vec![0.0; 6];
        v[4] = f64::NAN;
        assert!(WPlusLatent::new(shape23(), v, SourceTag::Encoded).is_err());
    }

    #[test]
    fn catalog_rejects_mixed_shapes() {
        let mut c = DirectionCatalog::new();
        c.insert(EditDirection::external("a", shape23(), vec![0.0; 6]).unwrap())
            .unwrap();
        let other = EditDirection::external("b", WPlusShape::new(1, 2).unwrap(), vec![0.0; 2]).unwrap();
        assert!(c.insert(other).is_err());
    }
}
