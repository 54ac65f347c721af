use crate::data::SegDataset;
use crate::nn::{FeatureExtractor, SegModel};
use crate::tensor::{Graph, EPSILON_NORM};
use crate::{Error, Result};

/// Masked average pooling of unit-normalized eval-mode features.
///
/// Averages within each image containing `class`, then across those images.
pub fn map_prototype(dataset: &SegDataset, class: u8, extractor: &FeatureExtractor) -> Result<Vec<f64>> {
    let d = extractor.feature_dim();
    let mut total = vec![0.0; d];
    let mut n_images = 0usize;
    for (idx, item) in dataset.iter().enumerate() {
        if !item.mask.contains(class) {
            continue;
        }
        let s = item.image.shape();
        let (h, w) = (s[1], s[2]);
        let mut g = Graph::new();
        let x = g.constant(&item.image);
        let x = g.reshape(x, vec![1, s[0], h, w])?;
        let (f, _, _) = extractor.record(&mut g, x, false, false)?;
        let feats = g.value(f);
        let mut acc = vec![0.0; d];
        let mut count = 0usize;
        for (p, &label) in item.mask.labels().iter().enumerate() {
            if label != class {
                continue;
            }
            let fi = &feats[p * d..(p + 1) * d];
            let norm = fi.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= EPSILON_NORM) {
                return Err(Error::DegenerateFeature { image: idx, y: p / w, x: p % w, norm });
            }
            for (a, v) in acc.iter_mut().zip(fi) {
                *a += v / norm;
            }
            count += 1;
        }
        for (t, a) in total.iter_mut().zip(&acc) {
            *t += a / count as f64;
        }
        n_images += 1;
    }
    if n_images == 0 {
        return Err(Error::EmptySupport(class));
    }
    Ok(total.into_iter().map(|t| t / n_images as f64).collect())
}

/// Appends one MAP prototype per new class (ascending class id) and leaves
/// every existing column untouched.
pub fn imprint(model: &SegModel, dataset: &SegDataset, new_classes: &[u8]) -> Result<SegModel> {
    let mut classes = new_classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if let Some(&c) = classes.iter().find(|c| model.classes().contains(c)) {
        return Err(Error::ClassExists(c));
    }
    let mut out = model.clone();
    for &k in &classes {
        let w = map_prototype(dataset, k, &model.extractor)?;
        out.classifier.push_column(k, &w)?;
    }
    Ok(out)
}
