use rand::seq::index;

use crate::data::{LabelMask, SegDataset};
use crate::rng::Rng;
use crate::{Error, Result};

/// Partition of the shape classes into equal contiguous folds. Class 0 is
/// background and belongs to no fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub all_classes: Vec<u8>,
    pub folds: Vec<Vec<u8>>,
}

impl ClassSplit {
    pub fn fold(&self, j: usize) -> Result<&[u8]> {
        self.folds
            .get(j)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("fold {j} does not exist, there are {}", self.folds.len())))
    }

    /// Background plus every class outside fold `j`.
    pub fn base_classes(&self, j: usize) -> Result<Vec<u8>> {
        let fold = self.fold(j)?;
        Ok(self.all_classes.iter().copied().filter(|c| !fold.contains(c)).collect())
    }
}

pub fn make_folds(n_classes: usize, fold_size: usize) -> Result<ClassSplit> {
    if n_classes < 2 || n_classes > 255 || fold_size == 0 || (n_classes - 1) % fold_size != 0 {
        return Err(Error::Config(format!(
            "{} shape classes cannot be split into folds of {fold_size}",
            n_classes.saturating_sub(1)
        )));
    }
    let all_classes = (0..n_classes as u8).collect();
    let folds = (0..(n_classes - 1) / fold_size)
        .map(|j| (1 + j * fold_size..1 + (j + 1) * fold_size).map(|c| c as u8).collect())
        .collect();
    Ok(ClassSplit { all_classes, folds })
}

/// Keeps, in order, the images without a single pixel of `new_classes`.
pub fn filter_base_dataset(pool: &SegDataset, new_classes: &[u8]) -> Result<SegDataset> {
    let kept: Vec<_> = pool.iter().filter(|it| !new_classes.iter().any(|&k| it.mask.contains(k))).cloned().collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!("every pool image contains one of {new_classes:?}")));
    }
    Ok(SegDataset::new(kept))
}

/// `shots` distinct images containing `class`, uniformly without replacement.
pub fn sample_fsl_dataset(pool: &SegDataset, class: u8, shots: usize, rng: &mut Rng) -> Result<SegDataset> {
    let eligible: Vec<_> = pool.with_class(class).collect();
    if eligible.len() < shots {
        return Err(Error::InsufficientImages { class, needed: shots, available: eligible.len() });
    }
    let picked = index::sample(rng, eligible.len(), shots);
    Ok(SegDataset::new(picked.iter().map(|i| eligible[i].clone()).collect()))
}

/// Old-class pixels become background; everything else is unchanged.
pub fn relabel_strict(mask: &LabelMask, old_classes: &[u8]) -> LabelMask {
    let mut out = mask.clone();
    for l in out.labels_mut() {
        if *l != 0 && old_classes.contains(l) {
            *l = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};
    use crate::rng::rng_for;

    #[test]
    fn voc_like_folds() {
        let s = make_folds(21, 5).unwrap();
        assert_eq!(s.folds.len(), 4);
        assert_eq!(s.folds[0], vec![1, 2, 3, 4, 5]);
        let mut all: Vec<u8> = s.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (1..=20).collect::<Vec<u8>>());
        assert!(make_folds(21, 6).is_err());
        assert_eq!(s.base_classes(1).unwrap(), [0, 1, 2, 3, 4, 5, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20]);
    }

    #[test]
    fn relabel_example() {
        let m = LabelMask::new(2, 2, vec![1, 16, 0, 16]).unwrap();
        let r = relabel_strict(&m, &[0, 1]);
        assert_eq!(r.labels(), &[0, 16, 0, 16]);
        assert_eq!(relabel_strict(&r, &[0, 1]), r);
        let plain = LabelMask::new(1, 2, vec![0, 16]).unwrap();
        assert_eq!(relabel_strict(&plain, &[1]), plain);
    }

    #[test]
    fn sampling_is_seeded_and_eligible() {
        let spec = SyntheticSpec::default();
        let pool = generate_dataset(&spec, 0, 60, &[1, 2, 3, 4]).unwrap();
        let a = sample_fsl_dataset(&pool, 2, 3, &mut rng_for(5, &[])).unwrap();
        let b = sample_fsl_dataset(&pool, 2, 3, &mut rng_for(5, &[])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|it| it.mask.contains(2)));
        let ids: std::collections::BTreeSet<u64> = a.iter().map(|it| it.id).collect();
        assert_eq!(ids.len(), 3);
        let too_many = sample_fsl_dataset(&pool, 7, 1, &mut rng_for(5, &[]));
        assert!(matches!(too_many, Err(Error::InsufficientImages { class: 7, needed: 1, available: 0 })));
    }

    #[test]
    fn empty_base_is_an_error() {
        let pool = generate_dataset(&SyntheticSpec::default(), 0, 5, &[3]).unwrap();
        assert!(filter_base_dataset(&pool, &[3]).is_err());
        assert_eq!(filter_base_dataset(&pool, &[4]).unwrap(), pool);
    }
}
