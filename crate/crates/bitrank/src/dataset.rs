//! MovieLens-format ingestion, dense id remapping, reproducible splits and
//! per-user positive sets.
//!
//! Every rating line becomes one implicit positive interaction (an optional
//! minimum-rating threshold can filter lines at parse time). Raw ids are
//! remapped to dense 0-based indices in first-appearance order and duplicate
//! (user, item) pairs collapse to one interaction.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"BLRI";
pub const DATASET_VERSION: u32 = 1;

/// Input file layout for ratings data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// `user::item::rating::timestamp`
    Dat,
    /// `user,item,rating,timestamp`, optional header row.
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dat" => Ok(Format::Dat),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidConfig(format!(
                "unknown format {other:?} (expected dat or csv)"
            ))),
        }
    }
}

/// Bidirectional raw id <-> dense index map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    raw_of_dense: Vec<u32>,
    dense_of_raw: HashMap<u32, u32>,
}

impl IdMap {
    fn intern(&mut self, raw: u32) -> u32 {
        match self.dense_of_raw.get(&raw) {
            Some(&dense) => dense,
            None => {
                let dense = self.raw_of_dense.len() as u32;
                self.raw_of_dense.push(raw);
                self.dense_of_raw.insert(raw, dense);
                dense
            }
        }
    }

    /// Identity map over `0..n`, used for datasets loaded from the compact
    /// binary format, which stores dense indices only.
    fn identity(n: usize) -> Self {
        IdMap {
            raw_of_dense: (0..n as u32).collect(),
            dense_of_raw: (0..n as u32).map(|i| (i, i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.raw_of_dense.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_of_dense.is_empty()
    }

    pub fn raw(&self, dense: u32) -> Option<u32> {
        self.raw_of_dense.get(dense as usize).copied()
    }

    pub fn dense(&self, raw: u32) -> Option<u32> {
        self.dense_of_raw.get(&raw).copied()
    }
}

/// Deduplicated (user, item) implicit-feedback pairs with dense id maps.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSet {
    user_ids: Vec<u32>,
    item_ids: Vec<u32>,
    num_users: usize,
    num_items: usize,
    user_map: IdMap,
    item_map: IdMap,
}

impl InteractionSet {
    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn user_ids(&self) -> &[u32] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[u32] {
        &self.item_ids
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.user_ids.iter().copied().zip(self.item_ids.iter().copied())
    }

    pub fn user_map(&self) -> &IdMap {
        &self.user_map
    }

    pub fn item_map(&self) -> &IdMap {
        &self.item_map
    }
}

/// Per-user sorted positive item sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSets {
    sets: Vec<Vec<u32>>,
    num_items: usize,
}

impl PositiveSets {
    /// Empty sets for every user; useful for held-in evaluation where no
    /// items should be excluded from ranking.
    pub fn empty(num_users: usize, num_items: usize) -> Self {
        PositiveSets {
            sets: vec![Vec::new(); num_users],
            num_items,
        }
    }

    pub fn num_users(&self) -> usize {
        self.sets.len()
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn set(&self, user: usize) -> &[u32] {
        &self.sets[user]
    }

    pub fn contains(&self, user: usize, item: u32) -> bool {
        self.sets[user].binary_search(&item).is_ok()
    }
}

/// Groups interactions into per-user sorted item sets.
pub fn positive_sets(interactions: &InteractionSet) -> PositiveSets {
    let mut sets = vec![Vec::new(); interactions.num_users];
    for (u, i) in interactions.pairs() {
        sets[u as usize].push(i);
    }
    for set in &mut sets {
        set.sort_unstable();
    }
    PositiveSets {
        sets,
        num_items: interactions.num_items,
    }
}

/// Split proportions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, test: f64, validation: f64, seed: u64) -> Result<Self> {
        if train <= 0.0 || test <= 0.0 || validation <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must all be positive, got {train}/{test}/{validation}"
            )));
        }
        let sum = train + test + validation;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "split fractions must sum to 1.0, got {sum}"
            )));
        }
        Ok(SplitSpec {
            train_fraction: train,
            test_fraction: test,
            validation_fraction: validation,
            seed,
        })
    }
}

/// Parses MovieLens-format ratings into an interaction set.
///
/// Every line is one implicit positive regardless of rating value.
pub fn parse_movielens(reader: impl BufRead, format: Format) -> Result<InteractionSet> {
    parse_movielens_filtered(reader, format, None)
}

/// Like [`parse_movielens`] but drops lines whose rating is below
/// `min_rating` before any id assignment happens.
pub fn parse_movielens_filtered(
    reader: impl BufRead,
    format: Format,
    min_rating: Option<f32>,
) -> Result<InteractionSet> {
    let mut user_map = IdMap::default();
    let mut item_map = IdMap::default();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen: HashSet<(u32, u32)> = HashSet::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match format {
            Format::Dat => trimmed.split("::").collect(),
            Format::Csv => trimmed.split(',').collect(),
        };
        let mut fields = fields.into_iter();
        let user_field = fields.next().unwrap_or("");
        if format == Format::Csv && lineno == 1 && user_field.parse::<u32>().is_err() {
            // Header row: first field is non-numeric.
            continue;
        }
        let parse_err = |what: &str, value: &str| Error::Parse {
            line: lineno,
            msg: format!("cannot parse {what} from {value:?}"),
        };
        let raw_user: u32 = user_field.parse().map_err(|_| parse_err("user id", user_field))?;
        let item_field = fields
            .next()
            .ok_or_else(|| parse_err("item id", trimmed))?;
        let raw_item: u32 = item_field.parse().map_err(|_| parse_err("item id", item_field))?;
        let rating_field = fields
            .next()
            .ok_or_else(|| parse_err("rating", trimmed))?;
        let rating: f32 = rating_field
            .parse()
            .map_err(|_| parse_err("rating", rating_field))?;
        let ts_field = fields
            .next()
            .ok_or_else(|| parse_err("timestamp", trimmed))?;
        let _timestamp: i64 = ts_field
            .parse()
            .map_err(|_| parse_err("timestamp", ts_field))?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: "too many fields".to_string(),
            });
        }
        if let Some(min) = min_rating {
            if rating < min {
                continue;
            }
        }
        let u = user_map.intern(raw_user);
        let i = item_map.intern(raw_item);
        if seen.insert((u, i)) {
            user_ids.push(u);
            item_ids.push(i);
        }
    }

    if user_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(InteractionSet {
        num_users: user_map.len(),
        num_items: item_map.len(),
        user_ids,
        item_ids,
        user_map,
        item_map,
    })
}

/// Random interaction-level partition into train/test/validation.
///
/// All three parts share the parent's id maps and entity counts; part sizes
/// follow the fractions with rounding absorbed by the validation part.
pub fn split(
    interactions: &InteractionSet,
    spec: &SplitSpec,
) -> Result<(InteractionSet, InteractionSet, InteractionSet)> {
    if interactions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let len = interactions.len();
    let n_train = (len as f64 * spec.train_fraction).round() as usize;
    let n_test = (len as f64 * spec.test_fraction).round() as usize;
    if n_train == 0 || n_test == 0 || n_train + n_test >= len {
        return Err(Error::InvalidConfig(format!(
            "split of {len} interactions by {}/{}/{} leaves an empty part",
            spec.train_fraction, spec.test_fraction, spec.validation_fraction
        )));
    }

    let mut indices: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);

    let subset = |chunk: &[usize]| {
        let mut order: Vec<usize> = chunk.to_vec();
        order.sort_unstable();
        InteractionSet {
            user_ids: order.iter().map(|&k| interactions.user_ids[k]).collect(),
            item_ids: order.iter().map(|&k| interactions.item_ids[k]).collect(),
            num_users: interactions.num_users,
            num_items: interactions.num_items,
            user_map: interactions.user_map.clone(),
            item_map: interactions.item_map.clone(),
        }
    };

    let train = subset(&indices[..n_train]);
    let test = subset(&indices[n_train..n_train + n_test]);
    let validation = subset(&indices[n_train + n_test..]);
    Ok((train, test, validation))
}

/// Writes the compact `BLRI` dataset format (little-endian).
///
/// Layout: magic, version u32, num_users u32, num_items u32, num_pairs u64,
/// then one (u32 user, u32 item) record per interaction. Raw id maps are
/// not persisted; a reloaded set carries identity maps.
pub fn write_interactions(set: &InteractionSet, w: &mut impl Write) -> Result<()> {
    w.write_all(&DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u32::<LittleEndian>(set.num_users as u32)?;
    w.write_u32::<LittleEndian>(set.num_items as u32)?;
    w.write_u64::<LittleEndian>(set.len() as u64)?;
    for (u, i) in set.pairs() {
        w.write_u32::<LittleEndian>(u)?;
        w.write_u32::<LittleEndian>(i)?;
    }
    Ok(())
}

/// Reads a `BLRI` dataset file.
pub fn read_interactions(r: &mut impl Read) -> Result<InteractionSet> {
    let map_eof = |e: std::io::Error, section: &'static str| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(section)
        } else {
            Error::Io(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| map_eof(e, "magic"))?;
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "version"))?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let num_users = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "header"))? as usize;
    let num_items = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "header"))? as usize;
    let num_pairs = r.read_u64::<LittleEndian>().map_err(|e| map_eof(e, "header"))? as usize;
    if num_pairs == 0 {
        return Err(Error::EmptyInput);
    }
    let mut user_ids = Vec::with_capacity(num_pairs);
    let mut item_ids = Vec::with_capacity(num_pairs);
    let mut seen = HashSet::with_capacity(num_pairs);
    for record in 0..num_pairs {
        let u = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "pairs"))?;
        let i = r.read_u32::<LittleEndian>().map_err(|e| map_eof(e, "pairs"))?;
        if u as usize >= num_users || i as usize >= num_items {
            return Err(Error::Parse {
                line: record + 1,
                msg: format!("pair ({u}, {i}) out of range"),
            });
        }
        if !seen.insert((u, i)) {
            return Err(Error::Parse {
                line: record + 1,
                msg: format!("duplicate pair ({u}, {i})"),
            });
        }
        user_ids.push(u);
        item_ids.push(i);
    }
    Ok(InteractionSet {
        user_ids,
        item_ids,
        num_users,
        num_items,
        user_map: IdMap::identity(num_users),
        item_map: IdMap::identity(num_items),
    })
}

/// Builds an interaction set directly from dense pairs; ids are taken as
/// already dense. Intended for synthetic data in tests and examples.
pub fn from_dense_pairs(
    num_users: usize,
    num_items: usize,
    pairs: &[(u32, u32)],
) -> Result<InteractionSet> {
    let mut seen = HashSet::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    for &(u, i) in pairs {
        if u as usize >= num_users || i as usize >= num_items {
            return Err(Error::InvalidConfig(format!(
                "pair ({u}, {i}) out of range for {num_users} users / {num_items} items"
            )));
        }
        if seen.insert((u, i)) {
            user_ids.push(u);
            item_ids.push(i);
        }
    }
    if user_ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(InteractionSet {
        user_ids,
        item_ids,
        num_users,
        num_items,
        user_map: IdMap::identity(num_users),
        item_map: IdMap::identity(num_items),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::io::Cursor;

    fn parse_dat(text: &str) -> Result<InteractionSet> {
        parse_movielens(Cursor::new(text), Format::Dat)
    }

    #[test]
    fn single_line_remaps_to_origin() {
        let set = parse_dat("1::1193::5::978300760\n").unwrap();
        assert_eq!(set.num_users(), 1);
        assert_eq!(set.num_items(), 1);
        assert_eq!(set.pairs().collect::<Vec<_>>(), vec![(0, 0)]);
    }

    #[test]
    fn duplicate_lines_collapse() {
        let set = parse_dat("1::1193::5::978300760\n1::1193::3::978300761\n").unwrap();
        assert_eq!(set.len(), 1);
    }

    #[test]
    fn ids_assigned_in_first_appearance_order() {
        let set = parse_dat("7::30::5::0\n2::30::4::0\n7::9::1::0\n").unwrap();
        assert_eq!(set.num_users(), 2);
        assert_eq!(set.num_items(), 2);
        assert_eq!(set.user_map().raw(0), Some(7));
        assert_eq!(set.user_map().raw(1), Some(2));
        assert_eq!(set.item_map().raw(0), Some(30));
        assert_eq!(set.item_map().raw(1), Some(9));
        // Raw -> dense -> raw composes to the identity.
        for raw in [7u32, 2] {
            let dense = set.user_map().dense(raw).unwrap();
            assert_eq!(set.user_map().raw(dense), Some(raw));
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_dat("1::2::3::4\nnot-a-line\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse_dat(""), Err(Error::EmptyInput)));
    }

    #[test]
    fn csv_header_is_autodetected() {
        let text = "userId,movieId,rating,timestamp\n1,10,4.0,100\n2,20,3.5,200\n";
        let set = parse_movielens(Cursor::new(text), Format::Csv).unwrap();
        assert_eq!(set.len(), 2);
        let headerless = "1,10,4.0,100\n2,20,3.5,200\n";
        let set2 = parse_movielens(Cursor::new(headerless), Format::Csv).unwrap();
        assert_eq!(set2.len(), 2);
    }

    #[test]
    fn min_rating_filters_before_id_assignment() {
        let text = "1::10::2::0\n2::20::5::0\n";
        let set =
            parse_movielens_filtered(Cursor::new(text), Format::Dat, Some(4.0)).unwrap();
        assert_eq!(set.len(), 1);
        // User 1 and item 10 never got ids.
        assert_eq!(set.num_users(), 1);
        assert_eq!(set.num_items(), 1);
        assert_eq!(set.user_map().raw(0), Some(2));
    }

    fn ten_interactions() -> InteractionSet {
        let pairs: Vec<(u32, u32)> = (0..10).map(|k| (k % 3, k)).collect();
        from_dense_pairs(3, 10, &pairs).unwrap()
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let spec = SplitSpec::new(0.8, 0.1, 0.1, 99).unwrap();
        let (train, test, val) = split(&ten_interactions(), &spec).unwrap();
        assert_eq!((train.len(), test.len(), val.len()), (8, 1, 1));
        assert_eq!(train.num_users(), 3);
        assert_eq!(train.num_items(), 10);
    }

    #[test]
    fn split_is_deterministic() {
        let spec = SplitSpec::new(0.6, 0.2, 0.2, 4242).unwrap();
        let a = split(&ten_interactions(), &spec).unwrap();
        let b = split(&ten_interactions(), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rejects_empty_parts() {
        assert!(SplitSpec::new(0.5, 0.5, 0.0, 1).is_err());
        let spec = SplitSpec::new(0.98, 0.01, 0.01, 1).unwrap();
        assert!(split(&ten_interactions(), &spec).is_err());
    }

    #[test]
    fn positive_sets_groups_pairs() {
        let set = from_dense_pairs(2, 3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let pos = positive_sets(&set);
        assert_eq!(pos.set(0), &[1, 2]);
        assert_eq!(pos.set(1), &[2]);
        assert!(pos.contains(0, 1));
        assert!(!pos.contains(1, 0));
    }

    #[test]
    fn positive_sets_empty_user() {
        // User 2 exists in the id space but has no pairs.
        let set = from_dense_pairs(3, 2, &[(0, 0), (1, 1)]).unwrap();
        let pos = positive_sets(&set);
        assert_eq!(pos.set(2), &[] as &[u32]);
    }

    #[test]
    fn positive_sets_match_brute_force_grouping() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(500);
        use rand::Rng;
        let pairs: Vec<(u32, u32)> = (0..500)
            .map(|_| (rng.gen_range(0..20), rng.gen_range(0..40)))
            .collect();
        let set = from_dense_pairs(20, 40, &pairs).unwrap();
        let pos = positive_sets(&set);
        for u in 0..20 {
            let expected: BTreeSet<u32> = set
                .pairs()
                .filter(|&(user, _)| user == u)
                .map(|(_, item)| item)
                .collect();
            let got: BTreeSet<u32> = pos.set(u as usize).iter().copied().collect();
            assert_eq!(got, expected, "user {u}");
        }
    }

    #[test]
    fn dataset_file_roundtrip() {
        let set = ten_interactions();
        let mut buf = Vec::new();
        write_interactions(&set, &mut buf).unwrap();
        let loaded = read_interactions(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.pairs().collect::<Vec<_>>(), set.pairs().collect::<Vec<_>>());
        assert_eq!(loaded.num_users(), set.num_users());
        assert_eq!(loaded.num_items(), set.num_items());
    }

    #[test]
    fn dataset_file_rejects_corruption() {
        let mut buf = Vec::new();
        write_interactions(&ten_interactions(), &mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'Z';
        assert!(matches!(
            read_interactions(&mut bad_magic.as_slice()),
            Err(Error::BadMagic { .. })
        ));

        let truncated = &buf[..buf.len() - 2];
        assert!(matches!(
            read_interactions(&mut &truncated[..]),
            Err(Error::Truncated(_))
        ));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(
            raw in proptest::collection::vec((0u32..50, 0u32..200), 20..1000),
            seed in any::<u64>(),
        ) {
            let users = 50;
            let items = 200;
            let set = match from_dense_pairs(users, items, &raw) {
                Ok(s) if s.len() >= 10 => s,
                _ => return Ok(()),
            };
            let spec = SplitSpec::new(0.8, 0.1, 0.1, seed).unwrap();
            let (train, test, val) = match split(&set, &spec) {
                Ok(parts) => parts,
                Err(_) => return Ok(()),
            };
            let all: BTreeSet<(u32, u32)> = set.pairs().collect();
            let t: BTreeSet<(u32, u32)> = train.pairs().collect();
            let s: BTreeSet<(u32, u32)> = test.pairs().collect();
            let v: BTreeSet<(u32, u32)> = val.pairs().collect();
            prop_assert!(t.is_disjoint(&s));
            prop_assert!(t.is_disjoint(&v));
            prop_assert!(s.is_disjoint(&v));
            let union: BTreeSet<(u32, u32)> =
                t.union(&s).chain(v.iter()).copied().collect();
            prop_assert_eq!(union, all);
            prop_assert_eq!(train.len() + test.len() + val.len(), set.len());
        }

        #[test]
        fn dense_ids_fully_populate_both_ranges(
            lines in proptest::collection::vec((1u32..30, 1u32..60), 1..200),
        ) {
            let text: String = lines
                .iter()
                .map(|(u, i)| format!("{u}::{i}::5::0\n"))
                .collect();
            let set = parse_movielens(Cursor::new(text), Format::Dat).unwrap();
            let max_user = set.user_ids().iter().max().copied().unwrap() as usize;
            let max_item = set.item_ids().iter().max().copied().unwrap() as usize;
            prop_assert_eq!(max_user + 1, set.num_users());
            prop_assert_eq!(max_item + 1, set.num_items());
        }
    }
}
