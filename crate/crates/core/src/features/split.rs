use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureError, FeatureResult, FeatureTensor};

/// Split rows into train/test so that every group (parent epoch) lands on
/// one side and per-class group counts follow `ratio`. Returns sorted row
/// indices.
pub fn stratified_split_indices(
    labels: &[usize],
    groups: &[usize],
    ratio: f64,
    seed: u64,
) -> FeatureResult<(Vec<usize>, Vec<usize>)> {
    if labels.len() != groups.len() {
        return Err(FeatureError::Shape("labels and groups differ in length".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FeatureError::Parameter(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    // group -> (label, rows)
    let mut by_group: BTreeMap<usize, (usize, Vec<usize>)> = BTreeMap::new();
    for (row, (&label, &group)) in labels.iter().zip(groups).enumerate() {
        let entry = by_group.entry(group).or_insert((label, Vec::new()));
        if entry.0 != label {
            return Err(FeatureError::Parameter(format!("group {group} mixes labels")));
        }
        entry.1.push(row);
    }
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&group, (label, _)) in &by_group {
        per_class.entry(*label).or_default().push(group);
    }
    for (&class, gs) in &per_class {
        let windows: usize = gs.iter().map(|g| by_group[g].1.len()).sum();
        if windows < 5 {
            return Err(FeatureError::Parameter(format!(
                "class {class} has {windows} windows; at least 5 are needed to split"
            )));
        }
    }

    // Largest-remainder allocation of the train share over classes.
    let total_groups = by_group.len();
    let target = (ratio * total_groups as f64).round() as usize;
    let quotas: Vec<(usize, f64)> = per_class.iter().map(|(&c, gs)| (c, ratio * gs.len() as f64)).collect();
    let mut take: BTreeMap<usize, usize> = quotas.iter().map(|&(c, q)| (c, q.floor() as usize)).collect();
    let mut remainders: Vec<(usize, f64)> = quotas.iter().map(|&(c, q)| (c, q - q.floor())).collect();
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut assigned: usize = take.values().sum();
    for (c, _) in remainders.iter().cycle().take(remainders.len()) {
        if assigned >= target {
            break;
        }
        *take.get_mut(c).expect("class present") += 1;
        assigned += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, gs) in &per_class {
        let mut gs = gs.clone();
        gs.shuffle(&mut rng);
        let k = take[class].min(gs.len());
        for (i, g) in gs.iter().enumerate() {
            let rows = &by_group[g].1;
            if i < k {
                train.extend_from_slice(rows);
            } else {
                test.extend_from_slice(rows);
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(FeatureError::Parameter(format!("ratio {ratio} leaves one side of the split empty")));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified, epoch-grouped train/test split of a feature tensor.
pub fn stratified_split(tensor: &FeatureTensor, ratio: f64, seed: u64) -> FeatureResult<(FeatureTensor, FeatureTensor)> {
    let groups: Vec<usize> = tensor.origins.iter().map(|o| o.epoch).collect();
    let (train, test) = stratified_split_indices(&tensor.labels, &groups, ratio, seed)?;
    Ok((tensor.select(&train), tensor.select(&test)))
}
