use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::ProfileSet;
use crate::error::{Error, Result};
use crate::seed;

/// Stratified train/validation split.
///
/// Twin groups (profiles sharing a `pair_id`) are kept together; groups are
/// stratified by sector and gender composition, so the gender × sector
/// balance of the input carries over to both parts. Both outputs are in
/// ascending id order.
pub fn split(profiles: &ProfileSet, val_fraction: f64, seed: u64) -> Result<(ProfileSet, ProfileSet)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, p) in profiles.profiles.iter().enumerate() {
        groups.entry(p.pair_id).or_default().push(i);
    }
    // Stratum key: (sector, sorted genders of the group).
    let mut strata: BTreeMap<(u8, Vec<u8>), Vec<u64>> = BTreeMap::new();
    for (&pair, members) in &groups {
        let sector = profiles.profiles[members[0]].sector;
        if members.iter().any(|&i| profiles.profiles[i].sector != sector) {
            return Err(Error::Split(format!("twin group {pair} spans several sectors")));
        }
        let mut genders: Vec<u8> = members.iter().map(|&i| profiles.profiles[i].gender).collect();
        genders.sort_unstable();
        strata.entry((sector, genders)).or_default().push(pair);
    }

    let mut val_groups = Vec::new();
    for ((sector, genders), mut pairs) in strata {
        let n = pairs.len();
        let n_val = (n as f64 * val_fraction).round() as usize;
        if n_val == 0 || n_val == n {
            return Err(Error::Split(format!(
                "stratum (sector {sector}, genders {genders:?}) has {n} groups, too few for val_fraction {val_fraction}"
            )));
        }
        let key = seed::mix(&[u64::from(sector), genders.iter().fold(0, |a, &g| a * 3 + u64::from(g) + 1)]);
        let mut rng = seed::rng_from(&[seed, seed::SPLIT, key]);
        pairs.shuffle(&mut rng);
        val_groups.extend_from_slice(&pairs[..n_val]);
    }
    val_groups.sort_unstable();

    let mut train = Vec::new();
    let mut val = Vec::new();
    for p in &profiles.profiles {
        if val_groups.binary_search(&p.pair_id).is_ok() {
            val.push(p.clone());
        } else {
            train.push(p.clone());
        }
    }
    train.sort_by_key(|p| p.id);
    val.sort_by_key(|p| p.id);
    Ok((ProfileSet::new(train), ProfileSet::new(val)))
}
