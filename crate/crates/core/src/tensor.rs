//! Dense row-major tensors and ordered named parameter collections.

use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Dense `f64` tensor stored in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            ));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Row `index` of a 2-D tensor.
    pub fn row(&self, index: usize) -> Result<&[f64]> {
        let (rows, cols) = self.as_matrix("row")?;
        if index >= rows {
            return Err(Error::Bounds {
                what: "matrix rows",
                index,
                len: rows,
            });
        }
        Ok(&self.values[index * cols..(index + 1) * cols])
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::dim(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim("sub", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            values,
        })
    }
}

/// An ordered collection of named tensors with a fixed layout.
///
/// Order is significant: it fixes gradient accumulation order, summation
/// order during aggregation, and the order of checkpoint sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let pos = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(pos).1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// True when names, shapes and order agree.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Elementwise `self - other` over a shared layout.
    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        if !self.same_layout(other) {
            return Err(Error::contract("parameter layouts differ"));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.sub(b)?)))
            .collect::<Result<_>>()?;
        Ok(ParamSet { entries })
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        if !self.same_layout(other) {
            return Err(Error::contract("parameter layouts differ"));
        }
        self.entries
            .iter()
            .zip(&other.entries)
            .try_fold(0.0, |acc, ((_, a), (_, b))| Ok(f64::max(acc, a.max_abs_diff(b)?)))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Moves every entry of `other` to the end of `self`.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, t) in other.entries {
            self.insert(name, t)?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Section {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Serialize for ParamSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.entries.len()))?;
        for (name, t) in &self.entries {
            map.serialize_entry(
                name,
                &Section {
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                },
            )?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct ParamSetVisitor;

        impl<'de> Visitor<'de> for ParamSetVisitor {
            type Value = ParamSet;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of parameter name to {shape, values}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<ParamSet, A::Error> {
                let mut set = ParamSet::new();
                while let Some((name, section)) = access.next_entry::<String, Section>()? {
                    let t = Tensor::new(section.shape, section.values).map_err(serde::de::Error::custom)?;
                    set.insert(name, t).map_err(serde::de::Error::custom)?;
                }
                Ok(set)
            }
        }

        deserializer.deserialize_map(ParamSetVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn row_access() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.row(1).unwrap(), &[3.0, 4.0]);
        assert!(matches!(t.row(2), Err(Error::Bounds { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(p.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn json_keeps_declaration_order() {
        let p = ParamSet::new()
            .with("zeta", Tensor::scalar(1.0))
            .unwrap()
            .with("alpha", Tensor::vector(vec![2.0, 3.0]))
            .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"zeta":{"shape":[1],"values":[1.0]},"alpha":{"shape":[2],"values":[2.0,3.0]}}"#
        );
        let back: ParamSet = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn layout_comparison() {
        let a = ParamSet::new().with("w", Tensor::zeros(&[2, 2])).unwrap();
        let b = ParamSet::new().with("w", Tensor::zeros(&[4])).unwrap();
        assert!(a.same_layout(&a.zeros_like()));
        assert!(!a.same_layout(&b));
        assert!(a.sub(&b).is_err());
    }
}
