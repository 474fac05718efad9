//! Two-objective gradient surgery (PCGrad) over flattened parameter gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Names and extents of the parameters concatenated in a [`FlatGrad`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl Layout {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        for (name, len) in params {
            entries.push(LayoutEntry {
                name: name.to_string(),
                offset,
                len,
            });
            offset += len;
        }
        Self { entries, total: offset }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Gradient of every trainable parameter concatenated in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatGrad {
    pub values: Vec<f64>,
    pub layout: Arc<Layout>,
}

impl FlatGrad {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn flatten(params: &[(&str, &[f64])]) -> Self {
        let layout = Arc::new(Layout::new(params.iter().map(|(n, g)| (*n, g.len()))));
        let mut values = Vec::with_capacity(layout.total());
        for (_, g) in params {
            values.extend_from_slice(g);
        }
        Self { values, layout }
    }

    /// Splits back into named pieces, checking the layout against `expected`.
    pub fn unflatten(&self, expected: &Layout) -> Result<Vec<(String, Vec<f64>)>> {
        if *self.layout != *expected {
            return Err(Error::Shape("flat gradient layout does not match the parameter set".into()));
        }
        if self.values.len() != expected.total() {
            return Err(Error::Shape(format!(
                "flat gradient has {} values, layout expects {}",
                self.values.len(),
                expected.total()
            )));
        }
        Ok(expected
            .entries()
            .iter()
            .map(|e| (e.name.clone(), self.values[e.offset..e.offset + e.len].to_vec()))
            .collect())
    }

    pub fn dot(&self, other: &FlatGrad) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Surgery on raw vectors. Returns `(a', b', a' + b')`.
///
/// When `a·b < 0` each vector loses its component along the other's original
/// direction: `a' = a − (a·b/‖b‖²) b`, `b' = b − (a·b/‖a‖²) a`. Otherwise
/// both pass through unchanged.
pub fn project_pair(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = dot(a, b);
    if d >= 0.0 || d.is_nan() {
        let sum = a.iter().zip(b).map(|(x, y)| x + y).collect();
        return (a.to_vec(), b.to_vec(), sum);
    }
    let nb = dot(b, b);
    let na = dot(a, a);
    let ca = d / nb;
    let cb = d / na;
    let a2: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - ca * y).collect();
    let b2: Vec<f64> = b.iter().zip(a).map(|(y, x)| y - cb * x).collect();
    let sum = a2.iter().zip(&b2).map(|(x, y)| x + y).collect();
    (a2, b2, sum)
}

fn same_layout(a: &FlatGrad, b: &FlatGrad) -> Result<()> {
    if a.layout != b.layout && *a.layout != *b.layout {
        return Err(Error::Shape("pcgrad inputs have different layouts".into()));
    }
    if a.values.len() != b.values.len() {
        return Err(Error::Shape("pcgrad inputs have different lengths".into()));
    }
    Ok(())
}

/// PCGrad over the whole flattened vector; returns `g_sft' + g_div'`.
pub fn pcgrad_pair(g_sft: &FlatGrad, g_div: &FlatGrad) -> Result<FlatGrad> {
    same_layout(g_sft, g_div)?;
    let (_, _, sum) = project_pair(&g_sft.values, &g_div.values);
    Ok(FlatGrad {
        values: sum,
        layout: g_sft.layout.clone(),
    })
}

/// PCGrad applied independently to each parameter tensor of the layout.
pub fn pcgrad_per_tensor(g_sft: &FlatGrad, g_div: &FlatGrad) -> Result<FlatGrad> {
    same_layout(g_sft, g_div)?;
    let mut values = Vec::with_capacity(g_sft.values.len());
    for e in g_sft.layout.entries() {
        let r = e.offset..e.offset + e.len;
        let (_, _, sum) = project_pair(&g_sft.values[r.clone()], &g_div.values[r]);
        values.extend(sum);
    }
    Ok(FlatGrad {
        values,
        layout: g_sft.layout.clone(),
    })
}

/// Plain sum, used when surgery is disabled.
pub fn plain_sum(g_sft: &FlatGrad, g_div: &FlatGrad) -> Result<FlatGrad> {
    same_layout(g_sft, g_div)?;
    Ok(FlatGrad {
        values: g_sft.values.iter().zip(&g_div.values).map(|(x, y)| x + y).collect(),
        layout: g_sft.layout.clone(),
    })
}
