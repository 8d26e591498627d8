//! Axis permutation and grouping in the einops notation used throughout
//! the network, e.g. `b c f h w -> (b h w) c f`.

use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// A parsed `lhs -> rhs` pattern. Each side is a list of groups; a group is
/// one or more elementary axis names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    lhs: Vec<Vec<String>>,
    rhs: Vec<Vec<String>>,
}

impl Pattern {
    pub fn parse(src: &str) -> Result<Self> {
        let normalized = src.replace('→', "->");
        let (lhs, rhs) = normalized
            .split_once("->")
            .ok_or_else(|| shape_err!("pattern '{src}' has no '->'"))?;
        let lhs = parse_side(lhs, src)?;
        let rhs = parse_side(rhs, src)?;

        let names = |side: &[Vec<String>], which: &str| -> Result<Vec<String>> {
            let mut seen = Vec::new();
            for name in side.iter().flatten() {
                if seen.contains(name) {
                    return Err(shape_err!("axis '{name}' repeated on the {which} of '{src}'"));
                }
                seen.push(name.clone());
            }
            Ok(seen)
        };
        let left = names(&lhs, "left")?;
        let right = names(&rhs, "right")?;
        if let Some(missing) = left.iter().find(|n| !right.contains(n)) {
            return Err(shape_err!("axis '{missing}' is dropped by '{src}'"));
        }
        if let Some(extra) = right.iter().find(|n| !left.contains(n)) {
            return Err(shape_err!("axis '{extra}' appears only on the right of '{src}'"));
        }
        Ok(Self { lhs, rhs })
    }

    pub fn inverse(&self) -> Self {
        Self { lhs: self.rhs.clone(), rhs: self.lhs.clone() }
    }
}

fn parse_side(side: &str, src: &str) -> Result<Vec<Vec<String>>> {
    let mut groups = Vec::new();
    let mut current: Option<Vec<String>> = None;
    let spaced = side.replace('(', " ( ").replace(')', " ) ");
    for tok in spaced.split_whitespace() {
        match tok {
            "(" => {
                if current.is_some() {
                    return Err(shape_err!("nested group in '{src}'"));
                }
                current = Some(Vec::new());
            }
            ")" => {
                let g = current
                    .take()
                    .ok_or_else(|| shape_err!("unbalanced ')' in '{src}'"))?;
                if g.is_empty() {
                    return Err(shape_err!("empty group in '{src}'"));
                }
                groups.push(g);
            }
            name => {
                if !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    return Err(shape_err!("bad axis name '{name}' in '{src}'"));
                }
                match current.as_mut() {
                    Some(g) => g.push(name.to_string()),
                    None => groups.push(vec![name.to_string()]),
                }
            }
        }
    }
    if current.is_some() {
        return Err(shape_err!("unbalanced '(' in '{src}'"));
    }
    Ok(groups)
}

/// A pattern resolved against a concrete input shape.
#[derive(Debug, Clone)]
pub struct Rearrange {
    pattern: Pattern,
    sizes: HashMap<String, usize>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    // Output elementary axes in order, with their length and input stride.
    out_elems: Vec<(usize, usize)>,
}

impl Rearrange {
    pub fn plan(pattern: &Pattern, shape: &[usize], known: &[(&str, usize)]) -> Result<Self> {
        if pattern.lhs.len() != shape.len() {
            let offending = pattern
                .lhs
                .get(shape.len())
                .map(|g| g.join(" "))
                .unwrap_or_else(|| format!("#{}", pattern.lhs.len()));
            return Err(shape_err!(
                "pattern names {} input axes but tensor {:?} has rank {} (offending axis '{}')",
                pattern.lhs.len(),
                shape,
                shape.len(),
                offending
            ));
        }
        let mut sizes: HashMap<String, usize> =
            known.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        for (group, &dim) in pattern.lhs.iter().zip(shape) {
            let mut product = 1usize;
            let mut unknown = None;
            for name in group {
                match sizes.get(name) {
                    Some(&s) if group.len() > 1 => product *= s,
                    Some(&s) => {
                        if s != dim {
                            return Err(shape_err!(
                                "axis '{name}' given as {s} but tensor has {dim}"
                            ));
                        }
                        product *= s;
                    }
                    None if unknown.is_none() => unknown = Some(name.clone()),
                    None => {
                        return Err(shape_err!(
                            "axis '{name}' in group ({}) needs an explicit size",
                            group.join(" ")
                        ))
                    }
                }
            }
            match unknown {
                Some(name) => {
                    if product == 0 || dim % product != 0 {
                        return Err(shape_err!(
                            "axis '{name}': length {dim} does not factor by {product}"
                        ));
                    }
                    sizes.insert(name, dim / product);
                }
                None if product != dim => {
                    return Err(shape_err!(
                        "group ({}) multiplies to {product} but axis has length {dim}",
                        group.join(" ")
                    ));
                }
                None => {}
            }
        }

        // Row-major strides of the elementary input axes.
        let in_elems: Vec<&String> = pattern.lhs.iter().flatten().collect();
        let mut stride_of = HashMap::new();
        let mut stride = 1usize;
        for name in in_elems.iter().rev() {
            stride_of.insert((*name).clone(), stride);
            stride *= sizes[*name];
        }
        let out_elems = pattern
            .rhs
            .iter()
            .flatten()
            .map(|n| (sizes[n], stride_of[n]))
            .collect();
        let out_shape = pattern
            .rhs
            .iter()
            .map(|g| g.iter().map(|n| sizes[n]).product())
            .collect();
        Ok(Self {
            pattern: pattern.clone(),
            sizes,
            in_shape: shape.to_vec(),
            out_shape,
            out_elems,
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn size_of(&self, axis: &str) -> Option<usize> {
        self.sizes.get(axis).copied()
    }

    /// The plan mapping this plan's output back to its input.
    pub fn inverse(&self) -> Self {
        let known: Vec<(&str, usize)> =
            self.sizes.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        Self::plan(&self.pattern.inverse(), &self.out_shape, &known)
            .expect("inverse of a resolved rearrangement is always valid")
    }

    pub fn apply<S: Scalar>(&self, t: &Tensor<S>) -> Tensor<S> {
        assert_eq!(t.shape(), self.in_shape.as_slice(), "rearrange plan applied to wrong shape");
        let data = permute(t.data(), &self.out_elems);
        Tensor::from_parts_unchecked(self.out_shape.clone(), data)
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }
}

fn permute<S: Copy>(src: &[S], elems: &[(usize, usize)]) -> Vec<S> {
    // Drop unit axes and fuse neighbours that stay contiguous in the source.
    let mut axes: Vec<(usize, usize)> = Vec::new();
    for &(len, stride) in elems.iter().filter(|e| e.0 != 1) {
        match axes.last_mut() {
            Some(last) if last.1 == stride * len => *last = (last.0 * len, stride),
            _ => axes.push((len, stride)),
        }
    }
    let total: usize = axes.iter().map(|a| a.0).product();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let Some(&(inner_len, inner_stride)) = axes.last() else {
        out.push(src[0]);
        return out;
    };
    let outer = &axes[..axes.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[base..base + inner_len]);
        } else {
            out.extend((0..inner_len).map(|i| src[base + i * inner_stride]));
        }
        let mut d = outer.len();
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += outer[d].1;
            if idx[d] < outer[d].0 {
                break;
            }
            base -= outer[d].1 * outer[d].0;
            idx[d] = 0;
        }
    }
}
