//! Rule-based class labels, derived abundances and stratified splitting.

use std::fmt;

use crate::error::{validation, Result};

/// Stellar class code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    /// Non-metal-poor.
    Nmp = 0,
    /// Carbon-enhanced metal-poor.
    Cemp = 1,
    /// Carbon-normal metal-poor.
    Cnmp = 2,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Nmp, ClassLabel::Cemp, ClassLabel::Cnmp];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Self::ALL.get(code).copied().ok_or_else(|| validation(format!("class code {code} not in 0..3")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Nmp => "NMP",
            ClassLabel::Cemp => "CEMP",
            ClassLabel::Cnmp => "CnMP",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[C/Fe] = [C/H] - [Fe/H]`.
pub fn carbon_ratio(c_h: f64, fe_h: f64) -> Result<f64> {
    if !c_h.is_finite() || !fe_h.is_finite() {
        return Err(validation(format!("non-finite abundance ([C/H]={c_h}, [Fe/H]={fe_h})")));
    }
    Ok(c_h - fe_h)
}

/// Thresholds of the labeling rule.
///
/// `fe_h >= metal_poor_below` is NMP; below it, `c_fe >= cemp_min_c_fe` is
/// CEMP and anything else CnMP. Both equality cases fall on the upper side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRule {
    pub metal_poor_below: f64,
    pub cemp_min_c_fe: f64,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self { metal_poor_below: -1.0, cemp_min_c_fe: 0.7 }
    }
}

impl LabelRule {
    pub fn assign(&self, fe_h: f64, c_fe: f64) -> Result<ClassLabel> {
        if !fe_h.is_finite() || !c_fe.is_finite() {
            return Err(validation(format!("non-finite label input ([Fe/H]={fe_h}, [C/Fe]={c_fe})")));
        }
        Ok(if fe_h >= self.metal_poor_below {
            ClassLabel::Nmp
        } else if c_fe >= self.cemp_min_c_fe {
            ClassLabel::Cemp
        } else {
            ClassLabel::Cnmp
        })
    }
}

/// [`LabelRule::assign`] with the default thresholds.
pub fn assign_label(fe_h: f64, c_fe: f64) -> Result<ClassLabel> {
    LabelRule::default().assign(fe_h, c_fe)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(validation(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Splits `total` into parts proportional to `weights` using the largest
/// remainder method; each part is within one of its exact share.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable on ties: earlier parts win
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stateless 64-bit mix (splitmix64 finaliser); a bijection for a fixed seed.
pub(crate) fn mix64(seed: u64, key: u64) -> u64 {
    let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ key;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-class split with the sample index as its key. See
/// [`stratified_split_keyed`].
pub fn stratified_split(labels: &[ClassLabel], ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    let keys: Vec<u64> = (0..labels.len() as u64).collect();
    stratified_split_keyed(&keys, labels, ratios, seed)
}

/// Assigns every sample to train/val/test so each present class is divided
/// in `ratios` (largest remainder, each split holding at least one sample
/// of every class).
///
/// Within a class, samples are ordered by a seeded hash of their key, so
/// the assignment of a sample depends only on its key, its class and the
/// class membership, not on the order of the input.
pub fn stratified_split_keyed(
    keys: &[u64],
    labels: &[ClassLabel],
    ratios: [f64; 3],
    seed: u64,
) -> Result<Vec<Split>> {
    if keys.len() != labels.len() {
        return Err(validation("stratified_split: keys and labels differ in length"));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(validation(format!("stratified_split: ratios must be positive, got {ratios:?}")));
    }
    let mut sorted = keys.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(validation("stratified_split: duplicate sample keys"));
    }
    let mut out = vec![Split::Train; labels.len()];
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(validation(format!(
                "stratified_split: class {class} has {} samples, need at least 3",
                members.len()
            )));
        }
        let mut counts = apportion(members.len(), &ratios);
        // every split gets at least one member of the class
        for s in 0..3 {
            if counts[s] == 0 {
                let donor = (0..3).max_by_key(|&d| counts[d]).expect("three splits");
                counts[donor] -= 1;
                counts[s] += 1;
            }
        }
        members.sort_by_key(|&i| mix64(seed, keys[i]));
        let mut it = members.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for i in it.by_ref().take(n) {
                out[i] = split;
            }
        }
    }
    Ok(out)
}
