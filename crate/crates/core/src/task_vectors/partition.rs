use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

/// How tensors are grouped into composition blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    /// One block per named tensor.
    PerTensor,
    /// Every tensor in one block.
    Single,
    /// Explicit `(block name, tensor names)` groups.
    Custom(Vec<(String, Vec<String>)>),
}

impl Default for PartitionScheme {
    fn default() -> Self {
        PartitionScheme::PerTensor
    }
}

/// Named blocks, each a group of whole tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    blocks: Vec<(String, Vec<String>)>,
}

impl BlockLayout {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn members(&self, block: usize) -> &[String] {
        &self.blocks[block].1
    }

    /// Block index for every tensor of `theta`, in tensor order; fails unless
    /// each tensor belongs to exactly one block.
    pub fn tensor_blocks(&self, theta: &ParamSet) -> Result<Vec<usize>> {
        let mut owner: Vec<Option<usize>> = vec![None; theta.len()];
        for (b, (block, members)) in self.blocks.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Layout(format!("block `{block}` is empty")));
            }
            for name in members {
                let k = theta
                    .index_of(name)
                    .ok_or_else(|| Error::Layout(format!("block `{block}` names unknown tensor `{name}`")))?;
                if let Some(prev) = owner[k] {
                    return Err(Error::Layout(format!(
                        "tensor `{name}` is in both `{}` and `{block}`",
                        self.blocks[prev].0
                    )));
                }
                owner[k] = Some(b);
            }
        }
        owner
            .into_iter()
            .zip(theta.names())
            .map(|(o, name)| o.ok_or_else(|| Error::Layout(format!("tensor `{name}` is not covered by any block"))))
            .collect()
    }

    /// Values grouped block by block, members in listed order.
    pub fn flatten(&self, theta: &ParamSet) -> Result<Vec<f64>> {
        self.tensor_blocks(theta)?;
        let mut out = Vec::with_capacity(theta.num_params());
        for (_, members) in &self.blocks {
            for name in members {
                out.extend_from_slice(theta.require(name)?.data());
            }
        }
        Ok(out)
    }

    /// Inverse of [`BlockLayout::flatten`] against a layout template.
    pub fn unflatten(&self, template: &ParamSet, flat: &[f64]) -> Result<ParamSet> {
        self.tensor_blocks(template)?;
        if flat.len() != template.num_params() {
            return Err(Error::Layout(format!("expected {} values, got {}", template.num_params(), flat.len())));
        }
        let mut out = template.clone();
        let mut offset = 0;
        for (_, members) in &self.blocks {
            for name in members {
                let k = template.index_of(name).expect("checked above");
                let t = &mut out.tensors_mut()[k];
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(out)
    }
}

/// Group the tensors of `theta` into blocks according to `scheme`.
pub fn block_partition(theta: &ParamSet, scheme: &PartitionScheme) -> Result<BlockLayout> {
    let blocks = match scheme {
        PartitionScheme::PerTensor => theta.names().iter().map(|n| (n.clone(), vec![n.clone()])).collect(),
        PartitionScheme::Single => vec![("all".to_string(), theta.names().to_vec())],
        PartitionScheme::Custom(groups) => {
            let mut seen = Vec::new();
            for (name, _) in groups {
                if seen.contains(name) {
                    return Err(Error::Layout(format!("duplicate block name `{name}`")));
                }
                seen.push(name.clone());
            }
            groups.clone()
        }
    };
    let layout = BlockLayout { blocks };
    if layout.is_empty() {
        return Err(Error::Layout("partition has no blocks".into()));
    }
    layout.tensor_blocks(theta)?;
    Ok(layout)
}
