use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Inputs, targets and disjoint train/val/test row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub x: Tensor2D,
    pub y: Tensor2D,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitDataset {
    pub fn new(x: Tensor2D, y: Tensor2D, train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::dim("dataset targets", x.rows(), y.rows()));
        }
        let mut seen = vec![false; x.rows()];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= x.rows() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Contract(format!("split index {i} out of range or repeated")));
            }
        }
        Ok(Self { x, y, train, val, test })
    }

    /// Contiguous split in row order with the given train and validation sizes.
    pub fn temporal(x: Tensor2D, y: Tensor2D, n_train: usize, n_val: usize) -> Result<Self> {
        let n = x.rows();
        if n_train + n_val > n {
            return Err(Error::Contract(format!(
                "split sizes {n_train}+{n_val} exceed {n} rows"
            )));
        }
        let train = (0..n_train).collect();
        let val = (n_train..n_train + n_val).collect();
        let test = (n_train + n_val..n).collect();
        Self::new(x, y, train, val, test)
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn subset(&self, split: Split) -> (Tensor2D, Tensor2D) {
        let idx = self.indices(split);
        (self.x.select_rows(idx), self.y.select_rows(idx))
    }

    /// Split tag of each row, `None` for rows outside every split.
    pub fn split_of_rows(&self) -> Vec<Option<Split>> {
        let mut tags = vec![None; self.x.rows()];
        for split in [Split::Train, Split::Val, Split::Test] {
            for &i in self.indices(split) {
                tags[i] = Some(split);
            }
        }
        tags
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.y.cols()
    }
}

/// Sizes `(train, val, test)` from fractions; the test split takes the remainder.
pub fn split_sizes(total: usize, train_frac: f64, val_frac: f64) -> (usize, usize, usize) {
    let train = (total as f64 * train_frac).round() as usize;
    let val = ((total as f64 * val_frac).round() as usize).min(total - train.min(total));
    let train = train.min(total);
    (train, val, total - train - val)
}
