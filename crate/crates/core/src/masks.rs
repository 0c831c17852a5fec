//! Structural slices, slice masks, shrink/expand packing and zero accounting.
//!
//! A slice is a whole row, whole column, or half of one, taken from the
//! canonical 2-D view of a prunable variable. Every slice is an arithmetic
//! progression over the row-major buffer, described by a [`SliceSpan`].

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{FedPruneError, Result};
use crate::importance::ImportanceTable;
use crate::schedule::quantize_slice_count;
use crate::var_store::{ByteCursor, PairSide, VarSpec, VarStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    WholeRow,
    WholeColumn,
    /// Each row split into a left and a right half.
    HalfRow,
    /// Each column split into a top and a bottom half.
    HalfColumn,
}

impl Pattern {
    pub fn as_str(self) -> &'static str {
        match self {
            Pattern::WholeRow => "whole_row",
            Pattern::WholeColumn => "whole_column",
            Pattern::HalfRow => "half_row",
            Pattern::HalfColumn => "half_column",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Pattern::WholeRow => 0,
            Pattern::WholeColumn => 1,
            Pattern::HalfRow => 2,
            Pattern::HalfColumn => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Pattern::WholeRow,
            1 => Pattern::WholeColumn,
            2 => Pattern::HalfRow,
            3 => Pattern::HalfColumn,
            t => return Err(FedPruneError::Format(format!("unknown pattern tag {t}"))),
        })
    }

    pub fn is_half(self) -> bool {
        matches!(self, Pattern::HalfRow | Pattern::HalfColumn)
    }
}

/// Elements `start, start + stride, ...` (`len` of them) of a row-major buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceSpan {
    pub start: usize,
    pub stride: usize,
    pub len: usize,
}

impl SliceSpan {
    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..self.len).map(move |i| self.start + i * self.stride)
    }
}

/// Slice layout of one matrix under one pattern.
///
/// Half patterns split the partitioned axis at `floor(len / 2)`. Slices of
/// the first half are numbered before those of the second half, and each
/// half is quantized on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceGeometry {
    pub pattern: Pattern,
    pub rows: usize,
    pub cols: usize,
}

impl SliceGeometry {
    pub fn new(pattern: Pattern, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FedPruneError::ShapeMismatch(format!("empty matrix {rows}x{cols}")));
        }
        let split_axis = match pattern {
            Pattern::HalfRow => Some(cols),
            Pattern::HalfColumn => Some(rows),
            _ => None,
        };
        if split_axis.is_some_and(|n| n < 2) {
            return Err(FedPruneError::ShapeMismatch(format!(
                "{rows}x{cols} matrix is too small to split into halves"
            )));
        }
        Ok(Self { pattern, rows, cols })
    }

    pub fn for_var(spec: &VarSpec, pattern: Pattern) -> Result<Self> {
        if !spec.is_prunable() {
            return Err(FedPruneError::NotPrunable(spec.name.clone()));
        }
        let (rows, cols) = spec.view_2d()?;
        Self::new(pattern, rows, cols)
    }

    /// Number of slices in one half (or in the whole matrix for whole patterns).
    fn per_group(&self) -> usize {
        match self.pattern {
            Pattern::WholeRow | Pattern::HalfRow => self.rows,
            Pattern::WholeColumn | Pattern::HalfColumn => self.cols,
        }
    }

    pub fn n_groups(&self) -> usize {
        if self.pattern.is_half() {
            2
        } else {
            1
        }
    }

    pub fn n_slices(&self) -> usize {
        self.per_group() * self.n_groups()
    }

    /// Slice-index ranges quantized independently.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let n = self.per_group();
        (0..self.n_groups()).map(|g| g * n..(g + 1) * n).collect()
    }

    pub fn span(&self, slice: usize) -> SliceSpan {
        assert!(slice < self.n_slices(), "slice {slice} out of range");
        let (r, c) = (self.rows, self.cols);
        match self.pattern {
            Pattern::WholeRow => SliceSpan { start: slice * c, stride: 1, len: c },
            Pattern::WholeColumn => SliceSpan { start: slice, stride: c, len: r },
            Pattern::HalfRow => {
                let (half, row) = (slice / r, slice % r);
                let split = c / 2;
                let (c0, len) = if half == 0 { (0, split) } else { (split, c - split) };
                SliceSpan { start: row * c + c0, stride: 1, len }
            }
            Pattern::HalfColumn => {
                let (half, col) = (slice / c, slice % c);
                let split = r / 2;
                let (r0, len) = if half == 0 { (0, split) } else { (split, r - split) };
                SliceSpan { start: r0 * c + col, stride: c, len }
            }
        }
    }

    pub fn slice_len(&self, slice: usize) -> usize {
        self.span(slice).len
    }
}

/// Slice descriptors of a prunable variable under `pattern`, in slice order.
pub fn enumerate_slices(spec: &VarSpec, pattern: Pattern) -> Result<Vec<SliceSpan>> {
    let geom = SliceGeometry::for_var(spec, pattern)?;
    Ok((0..geom.n_slices()).map(|i| geom.span(i)).collect())
}

/// Binary mask over the slices of one variable; `true` keeps the slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceMask {
    pub var_name: String,
    pub geometry: SliceGeometry,
    pub keep: Vec<bool>,
}

impl SliceMask {
    pub fn all_keep(var_name: &str, geometry: SliceGeometry) -> Self {
        Self { var_name: var_name.to_string(), geometry, keep: vec![true; geometry.n_slices()] }
    }

    pub fn pattern(&self) -> Pattern {
        self.geometry.pattern
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn kept_indices(&self) -> Vec<u32> {
        self.keep.iter().enumerate().filter(|(_, k)| **k).map(|(i, _)| i as u32).collect()
    }

    pub fn pruned_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, k)| !**k).map(|(i, _)| i).collect()
    }

    pub fn kept_params(&self) -> usize {
        (0..self.keep.len()).filter(|&i| self.keep[i]).map(|i| self.geometry.slice_len(i)).sum()
    }

    pub fn pruned_params(&self) -> usize {
        self.geometry.rows * self.geometry.cols - self.kept_params()
    }

    /// Element-level keep flags over the row-major buffer.
    pub fn element_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.geometry.rows * self.geometry.cols];
        for (i, _) in self.keep.iter().enumerate().filter(|(_, k)| **k) {
            for e in self.geometry.span(i).indices() {
                out[e] = true;
            }
        }
        out
    }
}

/// One mask per prunable variable, in store registration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub pattern: Pattern,
    pub masks: Vec<SliceMask>,
}

impl MaskSet {
    pub fn all_keep(store: &VarStore, pattern: Pattern) -> Result<Self> {
        let masks = store
            .specs()
            .filter(|s| s.is_prunable())
            .map(|s| Ok(SliceMask::all_keep(&s.name, SliceGeometry::for_var(s, pattern)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pattern, masks })
    }

    pub fn get(&self, name: &str) -> Option<&SliceMask> {
        self.masks.iter().find(|m| m.var_name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SliceMask> {
        self.masks.iter()
    }

    pub fn pruned_params(&self) -> usize {
        self.masks.iter().map(SliceMask::pruned_params).sum()
    }

    fn mask_for(&self, spec: &VarSpec) -> Result<&SliceMask> {
        let mask =
            self.get(&spec.name).ok_or_else(|| FedPruneError::MaskMismatch(format!("no mask for `{}`", spec.name)))?;
        let (rows, cols) = spec.view_2d()?;
        if (mask.geometry.rows, mask.geometry.cols) != (rows, cols) {
            return Err(FedPruneError::MaskMismatch(format!(
                "mask for `{}` is {}x{}, variable is {rows}x{cols}",
                spec.name, mask.geometry.rows, mask.geometry.cols
            )));
        }
        Ok(mask)
    }
}

/// Keep flags for one variable: within each group the `k` lowest-scoring
/// slices are pruned, ties going to the lower slice index.
pub fn mask_from_scores(geometry: &SliceGeometry, scores: &[f64], sparsity: f64) -> Result<Vec<bool>> {
    if scores.len() != geometry.n_slices() {
        return Err(FedPruneError::MaskMismatch(format!("{} scores for {} slices", scores.len(), geometry.n_slices())));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(FedPruneError::OutOfRange(format!("sparsity {sparsity} not in [0, 1]")));
    }
    let mut keep = vec![true; scores.len()];
    for group in geometry.groups() {
        let k = quantize_slice_count(sparsity, group.len());
        let mut order: Vec<usize> = group.collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        for &i in &order[..k] {
            keep[i] = false;
        }
    }
    Ok(keep)
}

/// Masks at one sparsity for every variable in the table.
pub fn generate_mask(scores: &ImportanceTable, sparsity: f64, pattern: Pattern) -> Result<MaskSet> {
    let per_var = vec![sparsity; scores.vars.len()];
    generate_mask_per_var(scores, &per_var, pattern)
}

/// Masks with a separate sparsity per variable, aligned with `scores.vars`.
pub fn generate_mask_per_var(scores: &ImportanceTable, sparsity: &[f64], pattern: Pattern) -> Result<MaskSet> {
    if sparsity.len() != scores.vars.len() {
        return Err(FedPruneError::MaskMismatch(format!(
            "{} sparsities for {} variables",
            sparsity.len(),
            scores.vars.len()
        )));
    }
    let masks = scores
        .vars
        .iter()
        .zip(sparsity)
        .map(|(v, &s)| {
            if v.geometry.pattern != pattern {
                return Err(FedPruneError::MaskMismatch(format!(
                    "scores for `{}` use pattern {:?}, requested {:?}",
                    v.name, v.geometry.pattern, pattern
                )));
            }
            Ok(SliceMask {
                var_name: v.name.clone(),
                geometry: v.geometry,
                keep: mask_from_scores(&v.geometry, &v.scores, s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSet { pattern, masks })
}

/// Pruned element count of `geometry` at `sparsity`.
fn pruned_elements(geometry: &SliceGeometry, sparsity: f64) -> usize {
    geometry.groups().into_iter().map(|g| quantize_slice_count(sparsity, g.len()) * geometry.slice_len(g.start)).sum()
}

/// Per-variable sparsities moved onto whole slices so that the total pruned
/// element count lands as close as possible to what the continuous
/// sparsities ask for. Flooring each variable separately can lose up to one
/// slice per variable; here variables nearest their next slice step are
/// raised one step at a time while that shrinks the shortfall.
pub fn round_to_slice_budget(geometries: &[SliceGeometry], sparsity: &[f64]) -> Result<Vec<f64>> {
    if geometries.len() != sparsity.len() {
        return Err(FedPruneError::MaskMismatch(format!(
            "{} sparsities for {} variables",
            sparsity.len(),
            geometries.len()
        )));
    }
    if let Some(s) = sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(FedPruneError::OutOfRange(format!("sparsity {s} not in [0, 1]")));
    }
    let target: f64 = geometries.iter().zip(sparsity).map(|(g, &s)| s * (g.rows * g.cols) as f64).sum();
    let mut out = sparsity.to_vec();
    let mut current: usize = geometries.iter().zip(&out).map(|(g, &s)| pruned_elements(g, s)).sum();
    loop {
        let gap = target - current as f64;
        // (variable, next level, added elements, distance to that level)
        let mut best: Option<(usize, f64, usize, f64)> = None;
        for (i, (g, &s)) in geometries.iter().zip(&out).enumerate() {
            let n = g.groups()[0].len();
            let k = quantize_slice_count(s, n);
            if k >= n {
                continue;
            }
            let next = (k + 1) as f64 / n as f64;
            let added = pruned_elements(g, next) - pruned_elements(g, s);
            if (gap - added as f64).abs() >= gap.abs() {
                continue;
            }
            let dist = next - s;
            if best.is_none_or(|b| dist < b.3) {
                best = Some((i, next, added, dist));
            }
        }
        match best {
            Some((i, next, added, _)) => {
                out[i] = next;
                current += added;
            }
            None => return Ok(out),
        }
    }
}

/// Generated masks must cover every prunable variable of `store`.
pub fn check_coverage(store: &VarStore, masks: &MaskSet) -> Result<()> {
    for spec in store.specs().filter(|s| s.is_prunable()) {
        masks.mask_for(spec)?;
    }
    Ok(())
}

// -- packing ------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum PackedVar {
    /// Kept slices of a prunable variable, concatenated in ascending slice order.
    Sliced { name: String, geometry: SliceGeometry, kept: Vec<u32>, values: Vec<f64> },
    /// Excluded variable, carried whole.
    Dense { name: String, shape: Vec<usize>, values: Vec<f64> },
}

impl PackedVar {
    pub fn name(&self) -> &str {
        match self {
            PackedVar::Sliced { name, .. } | PackedVar::Dense { name, .. } => name,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            PackedVar::Sliced { values, .. } | PackedVar::Dense { values, .. } => values,
        }
    }

    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        match self {
            PackedVar::Sliced { values, .. } | PackedVar::Dense { values, .. } => values,
        }
    }
}

/// Reduced model (or reduced delta) as sent over the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub vars: Vec<PackedVar>,
}

impl PackedModel {
    pub fn param_count(&self) -> usize {
        self.vars.iter().map(|v| v.values().len()).sum()
    }

    /// Same structure, values replaced by `f(self, other)` elementwise.
    pub fn zip_map(&self, other: &PackedModel, f: impl Fn(f64, f64) -> f64) -> Result<PackedModel> {
        if self.vars.len() != other.vars.len() {
            return Err(FedPruneError::MaskMismatch("packed models differ in variable count".into()));
        }
        let mut out = self.clone();
        for (o, (a, b)) in out.vars.iter_mut().zip(self.vars.iter().zip(&other.vars)) {
            if !same_layout(a, b) {
                return Err(FedPruneError::MaskMismatch(format!("packed layout differs for `{}`", a.name())));
            }
            for (dst, (x, y)) in o.values_mut().iter_mut().zip(a.values().iter().zip(b.values())) {
                *dst = f(*x, *y);
            }
        }
        Ok(out)
    }

    const MAGIC: &'static [u8; 4] = b"FPPM";
    const VERSION: u16 = 1;

    /// Exact size in bytes of [`PackedModel::encode`], computed without encoding.
    pub fn encoded_len(&self) -> usize {
        let mut n = 4 + 2 + 4;
        for v in &self.vars {
            n += 2 + v.name().len() + 1;
            n += match v {
                PackedVar::Sliced { kept, .. } => 1 + 4 + 4 + 4 + 4 * kept.len(),
                PackedVar::Dense { shape, .. } => 1 + 4 * shape.len(),
            };
        }
        n + 4 * self.param_count()
    }

    /// Wire format: a header with the variable table (name, kind, pattern,
    /// kept slice indices as `u32`), then all value buffers as little-endian `f32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.vars.len() as u32).to_le_bytes());
        for v in &self.vars {
            out.extend_from_slice(&(v.name().len() as u16).to_le_bytes());
            out.extend_from_slice(v.name().as_bytes());
            match v {
                PackedVar::Sliced { geometry, kept, .. } => {
                    out.push(0);
                    out.push(geometry.pattern.tag());
                    out.extend_from_slice(&(geometry.rows as u32).to_le_bytes());
                    out.extend_from_slice(&(geometry.cols as u32).to_le_bytes());
                    out.extend_from_slice(&(kept.len() as u32).to_le_bytes());
                    for k in kept {
                        out.extend_from_slice(&k.to_le_bytes());
                    }
                }
                PackedVar::Dense { shape, .. } => {
                    out.push(1);
                    out.push(shape.len() as u8);
                    for &d in shape {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                }
            }
        }
        for v in &self.vars {
            for &x in v.values() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4)? != Self::MAGIC {
            return Err(FedPruneError::Format("bad packed-model magic".into()));
        }
        let version = cur.u16()?;
        if version != Self::VERSION {
            return Err(FedPruneError::Format(format!("unsupported packed-model version {version}")));
        }
        let n = cur.u32()? as usize;
        let mut vars = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| FedPruneError::Format("variable name is not UTF-8".into()))?;
            match cur.u8()? {
                0 => {
                    let pattern = Pattern::from_tag(cur.u8()?)?;
                    let rows = cur.u32()? as usize;
                    let cols = cur.u32()? as usize;
                    let geometry = SliceGeometry::new(pattern, rows, cols)?;
                    let n_kept = cur.u32()? as usize;
                    let kept = (0..n_kept).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
                    if kept.iter().any(|&k| k as usize >= geometry.n_slices()) || kept.windows(2).any(|w| w[0] >= w[1])
                    {
                        return Err(FedPruneError::Format(format!("bad kept indices for `{name}`")));
                    }
                    counts.push(kept.iter().map(|&k| geometry.slice_len(k as usize)).sum());
                    vars.push(PackedVar::Sliced { name, geometry, kept, values: Vec::new() });
                }
                1 => {
                    let rank = cur.u8()? as usize;
                    let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                    counts.push(shape.iter().product());
                    vars.push(PackedVar::Dense { name, shape, values: Vec::new() });
                }
                k => return Err(FedPruneError::Format(format!("unknown variable kind {k}"))),
            }
        }
        for (v, count) in vars.iter_mut().zip(counts) {
            let values = (0..count).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            *v.values_mut() = values;
        }
        if !cur.is_empty() {
            return Err(FedPruneError::Format("trailing bytes after packed model".into()));
        }
        Ok(Self { vars })
    }
}

fn same_layout(a: &PackedVar, b: &PackedVar) -> bool {
    match (a, b) {
        (
            PackedVar::Sliced { name: n1, geometry: g1, kept: k1, values: v1 },
            PackedVar::Sliced { name: n2, geometry: g2, kept: k2, values: v2 },
        ) => n1 == n2 && g1 == g2 && k1 == k2 && v1.len() == v2.len(),
        (
            PackedVar::Dense { name: n1, shape: s1, values: v1 },
            PackedVar::Dense { name: n2, shape: s2, values: v2 },
        ) => n1 == n2 && s1 == s2 && v1.len() == v2.len(),
        _ => false,
    }
}

/// Packs arbitrary buffers laid out like `store` (weights, gradients, deltas).
pub fn pack(store: &VarStore, params: &[Vec<f64>], masks: &MaskSet) -> Result<PackedModel> {
    if params.len() != store.len() {
        return Err(FedPruneError::ShapeMismatch(format!("{} buffers for {} variables", params.len(), store.len())));
    }
    let mut vars = Vec::with_capacity(store.len());
    for (spec, buf) in store.specs().zip(params) {
        if buf.len() != spec.param_count {
            return Err(FedPruneError::ShapeMismatch(format!(
                "`{}` buffer has {} values, expected {}",
                spec.name,
                buf.len(),
                spec.param_count
            )));
        }
        if !spec.is_prunable() {
            vars.push(PackedVar::Dense { name: spec.name.clone(), shape: spec.shape.clone(), values: buf.clone() });
            continue;
        }
        let mask = masks.mask_for(spec)?;
        let kept = mask.kept_indices();
        let mut values = Vec::with_capacity(mask.kept_params());
        for &k in &kept {
            values.extend(mask.geometry.span(k as usize).indices().map(|e| buf[e]));
        }
        vars.push(PackedVar::Sliced { name: spec.name.clone(), geometry: mask.geometry, kept, values });
    }
    Ok(PackedModel { vars })
}

/// Reduces the store to its kept slices plus whole excluded variables.
pub fn shrink(store: &VarStore, masks: &MaskSet) -> Result<PackedModel> {
    pack(store, &store.params(), masks)
}

/// Maps a packed model back to full shape; masked positions are exactly zero.
pub fn expand(packed: &PackedModel, masks: &MaskSet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(packed.vars.len());
    for v in &packed.vars {
        match v {
            PackedVar::Dense { values, .. } => out.push(values.clone()),
            PackedVar::Sliced { name, geometry, kept, values } => {
                let mask =
                    masks.get(name).ok_or_else(|| FedPruneError::MaskMismatch(format!("no mask for `{name}`")))?;
                if mask.geometry != *geometry || mask.kept_indices() != *kept {
                    return Err(FedPruneError::MaskMismatch(format!(
                        "packed indices of `{name}` disagree with its mask"
                    )));
                }
                let mut full = vec![0.0; geometry.rows * geometry.cols];
                let mut src = values.iter();
                for &k in kept {
                    for e in geometry.span(k as usize).indices() {
                        full[e] = *src.next().ok_or_else(|| {
                            FedPruneError::MaskMismatch(format!("packed buffer of `{name}` is too short"))
                        })?;
                    }
                }
                if src.next().is_some() {
                    return Err(FedPruneError::MaskMismatch(format!("packed buffer of `{name}` is too long")));
                }
                out.push(full);
            }
        }
    }
    Ok(out)
}

/// `w ⊙ M` for every variable of the store; excluded variables pass through.
pub fn apply_mask(store: &VarStore, params: &[Vec<f64>], masks: &MaskSet) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(params.len());
    for (spec, buf) in store.specs().zip(params) {
        if spec.is_prunable() {
            let keep = masks.mask_for(spec)?.element_mask();
            out.push(buf.iter().zip(keep).map(|(&x, k)| if k { x } else { 0.0 }).collect());
        } else {
            out.push(buf.clone());
        }
    }
    Ok(out)
}

// -- zero accounting ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroEntry {
    pub name: String,
    pub params: usize,
    /// Elements inside the variable's own pruned slices.
    pub own_zeros: usize,
    /// Rows zeroed because the upstream partner dropped the matching column.
    pub induced_rows: Vec<usize>,
    /// Induced zeros not already counted in `own_zeros`.
    pub induced_zeros: usize,
}

impl ZeroEntry {
    pub fn total_zeros(&self) -> usize {
        self.own_zeros + self.induced_zeros
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroReport {
    pub entries: Vec<ZeroEntry>,
}

impl ZeroReport {
    pub fn prunable_params(&self) -> usize {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn own_zeros(&self) -> usize {
        self.entries.iter().map(|e| e.own_zeros).sum()
    }

    pub fn induced_zeros(&self) -> usize {
        self.entries.iter().map(|e| e.induced_zeros).sum()
    }

    pub fn ratio(&self, with_propagation: bool) -> f64 {
        let total = self.prunable_params();
        if total == 0 {
            return 0.0;
        }
        let zeros = if with_propagation { self.own_zeros() + self.induced_zeros() } else { self.own_zeros() };
        zeros as f64 / total as f64
    }
}

/// Zero counts per prunable variable, including rows of a downstream partner
/// made dead by pruned upstream columns. Propagation only applies to
/// [`Pattern::WholeColumn`]; other patterns report no induced zeros.
pub fn propagate_induced_zeros(masks: &MaskSet, store: &VarStore) -> Result<ZeroReport> {
    let mut entries = Vec::new();
    for spec in store.specs().filter(|s| s.is_prunable()) {
        let mask = masks.mask_for(spec)?;
        let mut entry = ZeroEntry {
            name: spec.name.clone(),
            params: spec.param_count,
            own_zeros: mask.pruned_params(),
            induced_rows: Vec::new(),
            induced_zeros: 0,
        };
        if masks.pattern == Pattern::WholeColumn {
            if let Some(link) = spec.link(PairSide::Downstream) {
                let (up, _) = store
                    .pairs()
                    .into_iter()
                    .find(|&(u, d)| {
                        store.var(d).spec.name == spec.name
                            && store.var(u).spec.link(PairSide::Upstream).is_some_and(|g| g.id == link.id)
                    })
                    .ok_or_else(|| FedPruneError::InvalidGroup {
                        group: link.id,
                        reason: format!("`{}` has no upstream partner", spec.name),
                    })?;
                let up_mask = masks.mask_for(&store.var(up).spec)?;
                let rows = up_mask.pruned_indices();
                let own_cols = mask.pruned_count();
                let cols = mask.geometry.cols;
                // Induced rows overlap the own pruned columns in |rows| * |own_cols| cells.
                entry.induced_zeros = rows.len() * (cols - own_cols);
                entry.induced_rows = rows;
            }
        }
        entries.push(entry);
    }
    Ok(ZeroReport { entries })
}

/// Fraction of prunable parameters that are zero under `masks`.
pub fn zero_param_ratio(store: &VarStore, masks: &MaskSet, with_propagation: bool) -> Result<f64> {
    Ok(propagate_induced_zeros(masks, store)?.ratio(with_propagation))
}
