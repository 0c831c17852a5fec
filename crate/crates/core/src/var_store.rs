//! Named model variables, their prunability roles and feed-forward pairing.
//!
//! Every variable has a canonical 2-D view: all leading dimensions collapse
//! into rows and the last dimension becomes columns. The view is a pure
//! relabeling of the row-major buffer, so no data moves when switching
//! between the stored shape and the matrix view.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{FedPruneError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Prunable,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairSide {
    /// `W`: its pruned columns induce zero rows downstream.
    Upstream,
    /// `W'`: receives the induced zero rows.
    Downstream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupLink {
    pub id: u32,
    pub side: PairSide,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// At most one upstream and one downstream link; a middle layer of a
    /// chain `W1 -> W2 -> W3` carries both.
    pub groups: Vec<GroupLink>,
    pub param_count: usize,
}

impl VarSpec {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_prunable(&self) -> bool {
        self.role == Role::Prunable
    }

    pub fn view_2d(&self) -> Result<(usize, usize)> {
        canonical_2d_view(self)
    }

    pub fn link(&self, side: PairSide) -> Option<GroupLink> {
        self.groups.iter().copied().find(|g| g.side == side)
    }
}

/// Collapses leading dimensions into rows, keeping the last dimension as columns.
pub fn canonical_2d_view(spec: &VarSpec) -> Result<(usize, usize)> {
    shape_2d(&spec.shape)
        .ok_or_else(|| FedPruneError::InvalidShape { name: spec.name.clone(), shape: spec.shape.clone() })
}

pub(crate) fn shape_2d(shape: &[usize]) -> Option<(usize, usize)> {
    match shape.split_last() {
        Some((&cols, lead)) if !lead.is_empty() => Some((lead.iter().product(), cols)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub spec: VarSpec,
    pub values: Vec<f64>,
}

/// Ordered collection of model variables. Registration order is the
/// iteration order everywhere (packing, aggregation, checkpoints).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarStore {
    vars: Vec<Variable>,
    index: HashMap<String, usize>,
    pub step: u64,
}

impl VarStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a zero-initialised variable.
    ///
    /// Rank-1 variables are always stored as [`Role::Excluded`]. A group id
    /// pairs two variables: the first registration is the upstream `W`, the
    /// second the downstream `W'`, and `W`'s column count must equal `W'`'s
    /// row count.
    pub fn register_var(&mut self, name: &str, shape: &[usize], role: Role, groups: &[u32]) -> Result<&VarSpec> {
        let count: usize = shape.iter().product();
        self.register_with_values(name, shape, role, groups, vec![0.0; count])
    }

    pub fn register_with_values(
        &mut self,
        name: &str,
        shape: &[usize],
        role: Role,
        groups: &[u32],
        values: Vec<f64>,
    ) -> Result<&VarSpec> {
        if self.index.contains_key(name) {
            return Err(FedPruneError::DuplicateVar(name.to_string()));
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(FedPruneError::InvalidShape { name: name.to_string(), shape: shape.to_vec() });
        }
        let param_count: usize = shape.iter().product();
        if values.len() != param_count {
            return Err(FedPruneError::ShapeMismatch(format!(
                "`{name}` expects {param_count} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedPruneError::NonFinite(name.to_string()));
        }
        let role = if shape.len() == 1 { Role::Excluded } else { role };
        let mut links: Vec<GroupLink> = Vec::with_capacity(groups.len());
        for &id in groups {
            let link = self.link_group(id, name, shape, role)?;
            if links.iter().any(|l| l.id == id || l.side == link.side) {
                return Err(FedPruneError::InvalidGroup {
                    group: id,
                    reason: format!("`{name}` already holds a {:?} link", link.side),
                });
            }
            links.push(link);
        }

        let spec = VarSpec { name: name.to_string(), shape: shape.to_vec(), role, groups: links, param_count };
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push(Variable { spec, values });
        Ok(&self.vars.last().expect("just pushed").spec)
    }

    fn link_group(&self, id: u32, name: &str, shape: &[usize], role: Role) -> Result<GroupLink> {
        let bad = |reason: String| FedPruneError::InvalidGroup { group: id, reason };
        if role != Role::Prunable || shape.len() < 2 {
            return Err(bad(format!("`{name}` must be a prunable matrix to join a pair")));
        }
        let members: Vec<&VarSpec> =
            self.vars.iter().map(|v| &v.spec).filter(|s| s.groups.iter().any(|g| g.id == id)).collect();
        match members.as_slice() {
            [] => Ok(GroupLink { id, side: PairSide::Upstream }),
            [up] => {
                let (_, up_cols) = canonical_2d_view(up)?;
                let (rows, _) = shape_2d(shape).expect("rank checked above");
                if up_cols != rows {
                    return Err(bad(format!("`{}` has {up_cols} columns but `{name}` has {rows} rows", up.name)));
                }
                Ok(GroupLink { id, side: PairSide::Downstream })
            }
            _ => Err(bad("a pair links exactly two variables".to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Variable> {
        self.vars.iter()
    }

    pub fn specs(&self) -> impl Iterator<Item = &VarSpec> {
        self.vars.iter().map(|v| &v.spec)
    }

    pub fn var(&self, i: usize) -> &Variable {
        &self.vars[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Variable> {
        self.index_of(name).map(|i| &self.vars[i]).ok_or_else(|| FedPruneError::UnknownVar(name.to_string()))
    }

    pub fn spec(&self, name: &str) -> Result<&VarSpec> {
        self.get(name).map(|v| &v.spec)
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        self.get(name).map(|v| v.values.as_slice())
    }

    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let i = self.index_of(name).ok_or_else(|| FedPruneError::UnknownVar(name.to_string()))?;
        let var = &mut self.vars[i];
        if values.len() != var.spec.param_count {
            return Err(FedPruneError::ShapeMismatch(format!(
                "`{name}` expects {} values, got {}",
                var.spec.param_count,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedPruneError::NonFinite(name.to_string()));
        }
        var.values = values;
        Ok(())
    }

    /// Snapshot of every buffer in registration order.
    pub fn params(&self) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| v.values.clone()).collect()
    }

    /// Replaces all buffers at once. Rejects the whole update if any value
    /// is non-finite, leaving the store untouched.
    pub fn set_params(&mut self, params: Vec<Vec<f64>>) -> Result<()> {
        if params.len() != self.vars.len() {
            return Err(FedPruneError::ShapeMismatch(format!(
                "expected {} buffers, got {}",
                self.vars.len(),
                params.len()
            )));
        }
        for (var, p) in self.vars.iter().zip(&params) {
            if p.len() != var.spec.param_count {
                return Err(FedPruneError::ShapeMismatch(format!(
                    "`{}` expects {} values, got {}",
                    var.spec.name,
                    var.spec.param_count,
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(FedPruneError::NonFinite(var.spec.name.clone()));
            }
        }
        for (var, p) in self.vars.iter_mut().zip(params) {
            var.values = p;
        }
        Ok(())
    }

    /// Complete `(upstream, downstream)` pairs as store indices.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, v) in self.vars.iter().enumerate() {
            let Some(GroupLink { id, .. }) = v.spec.link(PairSide::Upstream) else {
                continue;
            };
            let down =
                self.vars.iter().position(|w| w.spec.groups.contains(&GroupLink { id, side: PairSide::Downstream }));
            if let Some(j) = down {
                out.push((i, j));
            }
        }
        out
    }

    pub fn total_params(&self) -> usize {
        self.vars.iter().map(|v| v.spec.param_count).sum()
    }

    pub fn prunable_params(&self) -> usize {
        self.specs().filter(|s| s.is_prunable()).map(|s| s.param_count).sum()
    }

    pub fn excluded_params(&self) -> usize {
        self.total_params() - self.prunable_params()
    }

    // -- checkpoint container -------------------------------------------------

    const MAGIC: &'static [u8; 4] = b"FPCK";
    const VERSION: u16 = 1;

    /// Writes the checkpoint container: a header with the variable table,
    /// then every buffer as row-major little-endian `f32` in registration order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = Vec::new();
        header.extend_from_slice(Self::MAGIC);
        header.extend_from_slice(&Self::VERSION.to_le_bytes());
        header.extend_from_slice(&self.step.to_le_bytes());
        header.extend_from_slice(&(self.vars.len() as u32).to_le_bytes());
        for v in &self.vars {
            let s = &v.spec;
            let name = s.name.as_bytes();
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name);
            header.push(s.shape.len() as u8);
            for &d in &s.shape {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
            header.push(match s.role {
                Role::Prunable => 0,
                Role::Excluded => 1,
            });
            header.push(s.groups.len() as u8);
            for g in &s.groups {
                header.push(match g.side {
                    PairSide::Upstream => 1,
                    PairSide::Downstream => 2,
                });
                header.extend_from_slice(&g.id.to_le_bytes());
            }
        }
        out.write_all(&header)?;
        let mut body = Vec::with_capacity(self.total_params() * 4);
        for v in &self.vars {
            for &x in &v.values {
                body.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out.write_all(&body)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(4)? != Self::MAGIC {
            return Err(FedPruneError::Format("bad checkpoint magic".into()));
        }
        let version = cur.u16()?;
        if version != Self::VERSION {
            return Err(FedPruneError::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = cur.u64()?;
        let n = cur.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| FedPruneError::Format("variable name is not UTF-8".into()))?;
            let rank = cur.u8()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let role = match cur.u8()? {
                0 => Role::Prunable,
                1 => Role::Excluded,
                r => return Err(FedPruneError::Format(format!("unknown role tag {r}"))),
            };
            let n_groups = cur.u8()? as usize;
            let mut groups = Vec::with_capacity(n_groups);
            for _ in 0..n_groups {
                match cur.u8()? {
                    1 | 2 => groups.push(cur.u32()?),
                    g => return Err(FedPruneError::Format(format!("unknown group tag {g}"))),
                }
            }
            table.push((name, shape, role, groups));
        }
        let mut store = VarStore::new();
        for (name, shape, role, groups) in table {
            let count: usize = shape.iter().product();
            let values = (0..count).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            store.register_with_values(&name, &shape, role, &groups, values)?;
        }
        if !cur.is_empty() {
            return Err(FedPruneError::Format("trailing bytes after checkpoint".into()));
        }
        store.step = step;
        Ok(store)
    }
}

/// Little-endian reader over a byte slice, shared by the binary formats.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| FedPruneError::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len 2")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("len 8")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("len 4")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
