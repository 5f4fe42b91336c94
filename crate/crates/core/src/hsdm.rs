//! Hierarchical storage and dynamic matching.
//!
//! Stops are processed in order: boardings are added to the gallery index,
//! then every alighting passenger is matched against it. A match whose
//! confidence clears `sigma` is hot: it is final and its gallery entry leaves
//! the index. Otherwise the match is cold: the query temporarily holds its
//! rank-1 gallery id, remembers rank-2..K as alternatives, and the entry
//! stays searchable. A later query whose rank-1 hits a held id with strictly
//! higher confidence snatches it; the loser re-matches from its alternatives.
//! After the last stop every cold hold is promoted to hot.
//!
//! Re-matching only considers ids that are still in the index and not held
//! by anyone, so a displaced query never contests another hold and a snatch
//! never cascades past one re-match.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::sqfa::aggregate_tracklet;
use crate::types::{check_stop_order, FeatureVector, PassengerId, StopEvent};
use crate::vindex::{EntryMeta, FlatIndex, GalleryEntry, Neighbor};

/// `1 - d1 / d2` for the two best candidates.
///
/// A lone candidate has nothing to compete with and gets full confidence; a
/// zero rank-2 distance means the top two are indistinguishable and gets none.
pub fn confidence(result: &[Neighbor]) -> Result<f64> {
    match result {
        [] => Err(Error::EmptyResult),
        [_] => Ok(1.0),
        [first, second, ..] => {
            if second.distance <= 0.0 {
                Ok(0.0)
            } else {
                Ok((1.0 - first.distance / second.distance).clamp(0.0, 1.0))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum MatchState {
    Hot {
        gallery: PassengerId,
        confidence: f64,
        origin_stop: u32,
    },
    Cold {
        temp_match: PassengerId,
        alternatives: Vec<PassengerId>,
        confidence: f64,
    },
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: PassengerId,
    pub alighting_stop: u32,
    pub state: MatchState,
}

impl QueryRecord {
    pub fn is_hot(&self) -> bool {
        matches!(self.state, MatchState::Hot { .. })
    }

    pub fn is_cold(&self) -> bool {
        matches!(self.state, MatchState::Cold { .. })
    }

    /// The gallery id this query is (temporarily or finally) matched to.
    pub fn gallery(&self) -> Option<PassengerId> {
        match self.state {
            MatchState::Hot { gallery, .. } => Some(gallery),
            MatchState::Cold { temp_match, .. } => Some(temp_match),
            MatchState::Unmatched => None,
        }
    }

    pub fn confidence(&self) -> Option<f64> {
        match self.state {
            MatchState::Hot { confidence, .. } | MatchState::Cold { confidence, .. } => Some(confidence),
            MatchState::Unmatched => None,
        }
    }
}

/// One acquisition of a gallery id by a query, hot or cold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldEvent {
    pub gallery: PassengerId,
    pub query: PassengerId,
    pub confidence: f64,
    pub hot: bool,
}

#[derive(Debug, Clone, Default)]
pub struct MatchLedger {
    records: BTreeMap<PassengerId, QueryRecord>,
    cold_holders: BTreeMap<PassengerId, PassengerId>,
    queries: BTreeMap<PassengerId, Vec<f64>>,
    order: Vec<PassengerId>,
    holds: Vec<HoldEvent>,
}

impl MatchLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, query: PassengerId) -> Option<&QueryRecord> {
        self.records.get(&query)
    }

    /// Records in the order their queries were first processed.
    pub fn records(&self) -> impl Iterator<Item = &QueryRecord> + '_ {
        self.order.iter().map(move |q| &self.records[q])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Which query temporarily holds `gallery`, if any.
    pub fn holder(&self, gallery: PassengerId) -> Option<PassengerId> {
        self.cold_holders.get(&gallery).copied()
    }

    pub fn cold_holders(&self) -> &BTreeMap<PassengerId, PassengerId> {
        &self.cold_holders
    }

    pub fn hold_history(&self) -> &[HoldEvent] {
        &self.holds
    }

    pub fn count_hot(&self) -> usize {
        self.records.values().filter(|r| r.is_hot()).count()
    }

    pub fn count_cold(&self) -> usize {
        self.records.values().filter(|r| r.is_cold()).count()
    }

    pub fn count_unmatched(&self) -> usize {
        self.records
            .values()
            .filter(|r| r.state == MatchState::Unmatched)
            .count()
    }

    /// Flat rows for export; `is_correct` judges a (query, gallery) pair.
    pub fn export_rows(&self, is_correct: impl Fn(PassengerId, PassengerId) -> bool) -> Vec<LedgerRow> {
        self.records()
            .map(|r| {
                let (state, origin_stop) = match r.state {
                    MatchState::Hot { origin_stop, .. } => ("hot", Some(origin_stop)),
                    MatchState::Cold { .. } => ("cold", None),
                    MatchState::Unmatched => ("unmatched", None),
                };
                LedgerRow {
                    query_id: r.query_id,
                    state,
                    gallery_id: r.gallery(),
                    confidence: r.confidence(),
                    alighting_stop: r.alighting_stop,
                    origin_stop,
                    correct: r.gallery().map(|g| is_correct(r.query_id, g)).unwrap_or(false),
                }
            })
            .collect()
    }

    fn set(&mut self, query: PassengerId, stop: u32, state: MatchState) {
        self.records.insert(
            query,
            QueryRecord {
                query_id: query,
                alighting_stop: stop,
                state,
            },
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub query_id: PassengerId,
    pub state: &'static str,
    pub gallery_id: Option<PassengerId>,
    pub confidence: Option<f64>,
    pub alighting_stop: u32,
    pub origin_stop: Option<u32>,
    pub correct: bool,
}

pub fn process_boarding(index: &mut FlatIndex, boarding: &[(PassengerId, FeatureVector, EntryMeta)]) -> Result<()> {
    for (id, vector, meta) in boarding {
        index.add(GalleryEntry {
            id: *id,
            vector: vector.clone(),
            meta: *meta,
        })?;
    }
    Ok(())
}

fn assign(
    ledger: &mut MatchLedger,
    index: &mut FlatIndex,
    query: PassengerId,
    stop: u32,
    ranking: &[Neighbor],
    gamma: f64,
    cfg: &EngineConfig,
) -> Result<()> {
    let top = ranking[0].id;
    debug_assert!(ledger.holder(top).is_none(), "assigning a held id");
    if gamma > cfg.sigma {
        let meta = index.meta(top).ok_or(Error::UnknownId(top))?;
        index.remove(top)?;
        ledger.set(
            query,
            stop,
            MatchState::Hot {
                gallery: top,
                confidence: gamma,
                origin_stop: meta.boarding_stop,
            },
        );
    } else {
        let alternatives = ranking[1..].iter().map(|n| n.id).filter(|&id| id != top).collect();
        ledger.cold_holders.insert(top, query);
        ledger.set(
            query,
            stop,
            MatchState::Cold {
                temp_match: top,
                alternatives,
                confidence: gamma,
            },
        );
    }
    ledger.holds.push(HoldEvent {
        gallery: top,
        query,
        confidence: gamma,
        hot: gamma > cfg.sigma,
    });
    Ok(())
}

/// Matches one alighting passenger against the live gallery.
pub fn process_alighting(
    ledger: &mut MatchLedger,
    index: &mut FlatIndex,
    query: PassengerId,
    vector: &FeatureVector,
    stop: u32,
    cfg: &EngineConfig,
) -> Result<QueryRecord> {
    if index.is_empty() {
        return Err(Error::EmptyGallery(query));
    }
    if ledger.records.contains_key(&query) {
        return Err(Error::DuplicateId(query));
    }
    let ranking = index.search(vector.values(), cfg.top_k)?;
    let gamma = confidence(&ranking)?;
    ledger.queries.insert(query, vector.values().to_vec());
    ledger.order.push(query);

    let top = ranking[0].id;
    if ledger.holder(top).is_some() {
        snatch(ledger, index, query, stop, &ranking, gamma, top, cfg)?;
    } else {
        assign(ledger, index, query, stop, &ranking, gamma, cfg)?;
    }
    Ok(ledger.records[&query].clone())
}

/// Settles a challenge for `contested`, which is temp-held by another query.
///
/// The challenger takes the id only with strictly higher confidence; the
/// query left without a match re-matches from its alternatives.
#[allow(clippy::too_many_arguments)]
pub fn snatch(
    ledger: &mut MatchLedger,
    index: &mut FlatIndex,
    challenger: PassengerId,
    stop: u32,
    ranking: &[Neighbor],
    gamma: f64,
    contested: PassengerId,
    cfg: &EngineConfig,
) -> Result<()> {
    let incumbent = ledger.holder(contested).ok_or(Error::UnknownId(contested))?;
    let record = ledger.records[&incumbent].clone();
    let MatchState::Cold {
        alternatives,
        confidence: gamma_old,
        ..
    } = record.state
    else {
        unreachable!("cold_holders only tracks cold records");
    };

    if gamma > gamma_old {
        ledger.cold_holders.remove(&contested);
        assign(ledger, index, challenger, stop, ranking, gamma, cfg)?;
        rematch_from_alternatives(ledger, index, incumbent, record.alighting_stop, &alternatives, cfg)?;
    } else {
        let own: Vec<PassengerId> = ranking.iter().map(|n| n.id).filter(|&id| id != contested).collect();
        rematch_from_alternatives(ledger, index, challenger, stop, &own, cfg)?;
    }
    Ok(())
}

/// Re-matches `query` among its stored alternatives that are still live and
/// unheld, falling back to a fresh search over all unheld entries.
pub fn rematch_from_alternatives(
    ledger: &mut MatchLedger,
    index: &mut FlatIndex,
    query: PassengerId,
    stop: u32,
    alternatives: &[PassengerId],
    cfg: &EngineConfig,
) -> Result<QueryRecord> {
    let vector = ledger.queries.get(&query).ok_or(Error::UnknownId(query))?.clone();
    let eligible: Vec<PassengerId> = alternatives
        .iter()
        .copied()
        .filter(|&id| index.contains(id) && ledger.holder(id).is_none())
        .collect();

    let ranking = if eligible.is_empty() {
        let holders = &ledger.cold_holders;
        index.search_filtered(&vector, cfg.top_k, |id| !holders.contains_key(&id))?
    } else {
        index.rank_ids(&vector, &eligible)?
    };

    if ranking.is_empty() {
        ledger.set(query, stop, MatchState::Unmatched);
    } else {
        let gamma = confidence(&ranking)?;
        assign(ledger, index, query, stop, &ranking, gamma, cfg)?;
    }
    Ok(ledger.records[&query].clone())
}

/// Promotes every remaining cold hold to a hot match.
pub fn final_update(ledger: &mut MatchLedger, index: &mut FlatIndex) -> Result<()> {
    let holds: Vec<(PassengerId, PassengerId)> = ledger.cold_holders.iter().map(|(g, q)| (*g, *q)).collect();
    for (gallery, query) in holds {
        let meta = index.meta(gallery).ok_or(Error::UnknownId(gallery))?;
        index.remove(gallery)?;
        let record = ledger.records.get_mut(&query).expect("holder has a record");
        let confidence = record.confidence().unwrap_or(0.0);
        record.state = MatchState::Hot {
            gallery,
            confidence,
            origin_stop: meta.boarding_stop,
        };
    }
    ledger.cold_holders.clear();
    Ok(())
}

/// Baseline without confidence gating: take rank-1 and retire it immediately.
pub fn naive_alighting(
    ledger: &mut MatchLedger,
    index: &mut FlatIndex,
    query: PassengerId,
    vector: &FeatureVector,
    stop: u32,
    cfg: &EngineConfig,
) -> Result<QueryRecord> {
    if index.is_empty() {
        return Err(Error::EmptyGallery(query));
    }
    if ledger.records.contains_key(&query) {
        return Err(Error::DuplicateId(query));
    }
    let ranking = index.search(vector.values(), cfg.top_k)?;
    let gamma = confidence(&ranking)?;
    let top = ranking[0].id;
    let meta = index.meta(top).ok_or(Error::UnknownId(top))?;
    index.remove(top)?;
    ledger.queries.insert(query, vector.values().to_vec());
    ledger.order.push(query);
    ledger.set(
        query,
        stop,
        MatchState::Hot {
            gallery: top,
            confidence: gamma,
            origin_stop: meta.boarding_stop,
        },
    );
    ledger.holds.push(HoldEvent {
        gallery: top,
        query,
        confidence: gamma,
        hot: true,
    });
    Ok(ledger.records[&query].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Hsdm,
    Naive,
}

/// Owns the gallery index and ledger for one route.
#[derive(Debug, Clone)]
pub struct Matcher {
    cfg: EngineConfig,
    mode: MatchMode,
    index: FlatIndex,
    ledger: MatchLedger,
}

impl Matcher {
    pub fn new(cfg: EngineConfig, mode: MatchMode) -> Result<Self> {
        let cfg = cfg.validate()?;
        let index = FlatIndex::new(3 * cfg.d_part, cfg.distance);
        Ok(Self {
            cfg,
            mode,
            index,
            ledger: MatchLedger::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn ledger(&self) -> &MatchLedger {
        &self.ledger
    }

    pub fn board(&mut self, id: PassengerId, vector: FeatureVector, meta: EntryMeta) -> Result<()> {
        self.index.add(GalleryEntry { id, vector, meta })
    }

    pub fn alight(&mut self, id: PassengerId, vector: &FeatureVector, stop: u32) -> Result<QueryRecord> {
        match self.mode {
            MatchMode::Hsdm => process_alighting(&mut self.ledger, &mut self.index, id, vector, stop, &self.cfg),
            MatchMode::Naive => naive_alighting(&mut self.ledger, &mut self.index, id, vector, stop, &self.cfg),
        }
    }

    pub fn finish(&mut self) -> Result<()> {
        final_update(&mut self.ledger, &mut self.index)
    }

    pub fn into_parts(self) -> (MatchLedger, FlatIndex) {
        (self.ledger, self.index)
    }
}

/// Per-stop counts and timings of one route run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopMetrics {
    pub stop_id: u32,
    pub boarded: usize,
    pub alighted: usize,
    /// Hot matches made while processing this stop's alightings.
    pub hot: usize,
    /// Alighting passengers of this stop left cold at the end of the stop.
    pub cold: usize,
    pub unmatched: usize,
    /// Gallery entries live after the stop.
    pub gallery_size: usize,
    pub featurize_secs: f64,
    /// `None` when nobody alighted.
    pub match_secs: Option<f64>,
}

/// Optional instrumentation for `run_route`.
pub trait RouteHooks {
    /// Monotone clock in seconds; the default reports no time.
    fn now_secs(&mut self) -> f64 {
        0.0
    }

    /// Called just before each alighting passenger is matched.
    fn before_query(&mut self, _index: &FlatIndex, _query: PassengerId, _vector: &FeatureVector, _stop: u32) {}
}

/// Hooks that do nothing.
pub struct NoHooks;

impl RouteHooks for NoHooks {}

#[derive(Debug, Clone)]
pub struct RouteOutcome {
    pub ledger: MatchLedger,
    pub index: FlatIndex,
    pub per_stop: Vec<StopMetrics>,
}

/// Runs a whole route: per stop, aggregate and add boardings, then aggregate
/// and match alightings; promote cold holds at the end.
pub fn run_route(
    stops: &[StopEvent],
    cfg: &EngineConfig,
    mode: MatchMode,
    hooks: &mut impl RouteHooks,
) -> Result<RouteOutcome> {
    check_stop_order(stops)?;
    let mut matcher = Matcher::new(cfg.clone(), mode)?;
    let mut per_stop = Vec::with_capacity(stops.len());

    for stop in stops {
        let mut featurize = 0.0;
        let mut matching = 0.0;

        for p in &stop.boarding {
            let t0 = hooks.now_secs();
            let fv = aggregate_tracklet(&p.tracklet, matcher.config())?;
            featurize += hooks.now_secs() - t0;
            matcher.board(
                p.id,
                fv,
                EntryMeta {
                    boarding_stop: stop.stop_id,
                    door: p.door,
                },
            )?;
        }

        let mut hot = 0;
        for p in &stop.alighting {
            let t0 = hooks.now_secs();
            let fv = aggregate_tracklet(&p.tracklet, matcher.config())?;
            let t1 = hooks.now_secs();
            hooks.before_query(matcher.index(), p.id, &fv, stop.stop_id);
            let t2 = hooks.now_secs();
            let rec = matcher.alight(p.id, &fv, stop.stop_id)?;
            matching += hooks.now_secs() - t2;
            featurize += t1 - t0;
            hot += rec.is_hot() as usize;
        }

        let this_stop = |r: &&QueryRecord| r.alighting_stop == stop.stop_id;
        let ledger = matcher.ledger();
        per_stop.push(StopMetrics {
            stop_id: stop.stop_id,
            boarded: stop.boarding.len(),
            alighted: stop.alighting.len(),
            hot,
            cold: ledger.records().filter(this_stop).filter(|r| r.is_cold()).count(),
            unmatched: ledger
                .records()
                .filter(this_stop)
                .filter(|r| r.state == MatchState::Unmatched)
                .count(),
            gallery_size: matcher.index().size(),
            featurize_secs: featurize,
            match_secs: (!stop.alighting.is_empty()).then_some(matching),
        });
    }

    matcher.finish()?;
    let (ledger, index) = matcher.into_parts();
    Ok(RouteOutcome {
        ledger,
        index,
        per_stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Door;
    use alloc::vec;

    const META: EntryMeta = EntryMeta {
        boarding_stop: 1,
        door: Door::Front,
    };

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), v.len() / 3).unwrap()
    }

    fn n(id: u64, distance: f64) -> Neighbor {
        Neighbor {
            id: PassengerId(id),
            distance,
        }
    }

    fn cfg() -> EngineConfig {
        EngineConfig {
            d_part: 1,
            ..Default::default()
        }
    }

    fn gallery(points: &[(u64, [f64; 3])]) -> FlatIndex {
        let mut idx = FlatIndex::new(3, cfg().distance);
        let rows: Vec<_> = points.iter().map(|(id, v)| (PassengerId(*id), fv(v), META)).collect();
        process_boarding(&mut idx, &rows).unwrap();
        idx
    }

    #[test]
    fn confidence_cases() {
        assert_eq!(confidence(&[n(1, 0.5), n(2, 1.0)]).unwrap(), 0.5);
        assert_eq!(confidence(&[n(1, 0.0), n(2, 1.0)]).unwrap(), 1.0);
        assert_eq!(confidence(&[n(1, 0.3), n(2, 0.3)]).unwrap(), 0.0);
        assert_eq!(confidence(&[n(1, 0.0), n(2, 0.0)]).unwrap(), 0.0);
        assert_eq!(confidence(&[n(1, 17.0)]).unwrap(), 1.0);
        assert_eq!(confidence(&[]), Err(Error::EmptyResult));
    }

    #[test]
    fn boarding_cases() {
        let mut idx = FlatIndex::new(3, cfg().distance);
        let rows: Vec<_> = (0..8).map(|i| (PassengerId(i), fv(&[i as f64, 0.0, 0.0]), META)).collect();
        process_boarding(&mut idx, &rows).unwrap();
        assert_eq!(idx.size(), 8);
        process_boarding(&mut idx, &[]).unwrap();
        assert_eq!(idx.size(), 8);
        assert_eq!(
            process_boarding(&mut idx, &rows[..1]),
            Err(Error::DuplicateId(PassengerId(0)))
        );
    }

    #[test]
    fn confident_match_is_hot_and_retired() {
        // Distances 1 and 4 give confidence 0.75.
        let mut idx = gallery(&[(1, [1.0, 0.0, 0.0]), (2, [2.0, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        let rec = process_alighting(&mut ledger, &mut idx, PassengerId(10), &fv(&[0.0; 3]), 2, &cfg()).unwrap();
        assert_eq!(
            rec.state,
            MatchState::Hot { gallery: PassengerId(1), confidence: 0.75, origin_stop: 1 }
        );
        assert!(!idx.contains(PassengerId(1)));
    }

    #[test]
    fn weak_match_is_cold_and_kept() {
        // Squared distances 1.0 and 1.0526...: confidence 0.05.
        let d2 = 1.0 / 0.95;
        let mut idx = gallery(&[(1, [1.0, 0.0, 0.0]), (2, [libm::sqrt(d2), 0.0, 0.0]), (3, [5.0, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        let rec = process_alighting(&mut ledger, &mut idx, PassengerId(10), &fv(&[0.0; 3]), 2, &cfg()).unwrap();
        let MatchState::Cold { temp_match, alternatives, confidence } = rec.state else { panic!() };
        assert_eq!(temp_match, PassengerId(1));
        assert_eq!(alternatives, vec![PassengerId(2), PassengerId(3)]);
        assert!((confidence - 0.05).abs() < 1e-12);
        assert!(idx.contains(PassengerId(1)));
        assert_eq!(ledger.holder(PassengerId(1)), Some(PassengerId(10)));
    }

    #[test]
    fn empty_gallery_is_an_error() {
        let mut idx = FlatIndex::new(3, cfg().distance);
        let mut ledger = MatchLedger::new();
        assert_eq!(
            process_alighting(&mut ledger, &mut idx, PassengerId(1), &fv(&[0.0; 3]), 2, &cfg()),
            Err(Error::EmptyGallery(PassengerId(1)))
        );
    }

    /// A at the origin, B at 1, C at 1.02. Query q1 sits between A and B
    /// (cold on A), query q2 sits right on A (confident) and snatches it.
    #[test]
    fn stronger_challenger_snatches_and_incumbent_rematches() {
        let mut idx = gallery(&[(1, [0.0, 0.0, 0.0]), (2, [1.0, 0.0, 0.0]), (3, [0.0, 3.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        let c = cfg();
        let q1 = process_alighting(&mut ledger, &mut idx, PassengerId(11), &fv(&[0.49, 0.0, 0.0]), 2, &c).unwrap();
        assert!(q1.is_cold());
        assert_eq!(q1.gallery(), Some(PassengerId(1)));
        let gamma_old = q1.confidence().unwrap();

        let q2 = process_alighting(&mut ledger, &mut idx, PassengerId(12), &fv(&[0.05, 0.0, 0.0]), 3, &c).unwrap();
        assert!(q2.confidence().unwrap() > gamma_old);
        assert_eq!(q2.state, MatchState::Hot { gallery: PassengerId(1), confidence: q2.confidence().unwrap(), origin_stop: 1 });
        assert!(!idx.contains(PassengerId(1)));

        // q1 falls back to its alternatives {2, 3}: distances 0.2601 and 9.2401.
        let q1 = ledger.record(PassengerId(11)).unwrap();
        assert_eq!(q1.gallery(), Some(PassengerId(2)));
        assert!(q1.is_hot());
    }

    #[test]
    fn weaker_challenger_looks_elsewhere() {
        // Incumbent q1 on A with low confidence; challenger q2 even less sure.
        let mut idx = gallery(&[(1, [0.0, 0.0, 0.0]), (2, [1.0, 0.0, 0.0]), (3, [-1.0, 0.0, 0.0]), (4, [0.0, 5.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        let c = cfg();
        let q1 = process_alighting(&mut ledger, &mut idx, PassengerId(11), &fv(&[0.49, 0.0, 0.0]), 2, &c).unwrap();
        assert!(q1.is_cold());
        let q2 = process_alighting(&mut ledger, &mut idx, PassengerId(12), &fv(&[-0.495, 0.0, 0.0]), 2, &c).unwrap();
        // q2's rank-1 is A with confidence ~0.039, below q1's ~0.077: it keeps
        // looking among {3, 2, 4}; 3 wins with confidence 1 - 0.255/2.235.
        assert_eq!(ledger.holder(PassengerId(1)), Some(PassengerId(11)));
        assert_eq!(q2.gallery(), Some(PassengerId(3)));
        assert!(q2.is_hot());
    }

    #[test]
    fn tie_keeps_incumbent() {
        let mut idx = gallery(&[(1, [0.0, 0.0, 0.0]), (2, [1.0, 0.0, 0.0]), (3, [0.0, 4.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        let c = cfg();
        process_alighting(&mut ledger, &mut idx, PassengerId(11), &fv(&[0.49, 0.0, 0.0]), 2, &c).unwrap();
        // Same observation again: equal confidence, so the holder stays.
        let q2 = process_alighting(&mut ledger, &mut idx, PassengerId(12), &fv(&[0.49, 0.0, 0.0]), 2, &c).unwrap();
        assert_eq!(ledger.holder(PassengerId(1)), Some(PassengerId(11)));
        assert_ne!(q2.gallery(), Some(PassengerId(1)));
    }

    #[test]
    fn snatch_direct_cases() {
        let c = cfg();
        let setup = |gamma_old: f64| {
            let mut idx = gallery(&[(1, [0.0; 3]), (2, [1.0, 0.0, 0.0]), (3, [2.0, 0.0, 0.0])]);
            let mut ledger = MatchLedger::new();
            ledger.queries.insert(PassengerId(11), vec![0.0; 3]);
            ledger.order.push(PassengerId(11));
            ledger.queries.insert(PassengerId(12), vec![0.0; 3]);
            ledger.order.push(PassengerId(12));
            ledger.cold_holders.insert(PassengerId(1), PassengerId(11));
            ledger.set(
                PassengerId(11),
                2,
                MatchState::Cold { temp_match: PassengerId(1), alternatives: vec![PassengerId(2)], confidence: gamma_old },
            );
            idx.remove(PassengerId(3)).unwrap();
            (idx, ledger)
        };
        let ranking = [n(1, 0.0), n(2, 1.0)];

        let (mut idx, mut ledger) = setup(0.1);
        snatch(&mut ledger, &mut idx, PassengerId(12), 3, &ranking, 0.4, PassengerId(1), &c).unwrap();
        assert!(ledger.record(PassengerId(12)).unwrap().is_hot());
        assert!(!idx.contains(PassengerId(1)));
        assert_eq!(ledger.record(PassengerId(11)).unwrap().gallery(), Some(PassengerId(2)));

        let (mut idx, mut ledger) = setup(0.1);
        snatch(&mut ledger, &mut idx, PassengerId(12), 3, &ranking, 0.08, PassengerId(1), &c).unwrap();
        assert_eq!(ledger.holder(PassengerId(1)), Some(PassengerId(11)));
        assert_eq!(ledger.record(PassengerId(12)).unwrap().gallery(), Some(PassengerId(2)));

        let (mut idx, mut ledger) = setup(0.1);
        snatch(&mut ledger, &mut idx, PassengerId(12), 3, &ranking, 0.1, PassengerId(1), &c).unwrap();
        assert_eq!(ledger.holder(PassengerId(1)), Some(PassengerId(11)));

        // Winning below sigma leaves the challenger cold on the contested id.
        let (mut idx, mut ledger) = setup(0.05);
        snatch(&mut ledger, &mut idx, PassengerId(12), 3, &ranking, 0.1, PassengerId(1), &c).unwrap();
        assert_eq!(ledger.holder(PassengerId(1)), Some(PassengerId(12)));
        assert!(idx.contains(PassengerId(1)));
    }

    #[test]
    fn rematch_cases() {
        let c = cfg();
        let mut idx = gallery(&[(1, [0.0; 3]), (2, [1.0, 0.0, 0.0]), (3, [2.0, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        ledger.queries.insert(PassengerId(20), vec![0.0; 3]);
        ledger.order.push(PassengerId(20));
        // Alternatives (2, 3) with 2 already retired: lone candidate 3, forced hot.
        idx.remove(PassengerId(2)).unwrap();
        let rec = rematch_from_alternatives(&mut ledger, &mut idx, PassengerId(20), 4, &[PassengerId(2), PassengerId(3)], &c).unwrap();
        assert_eq!(rec.state, MatchState::Hot { gallery: PassengerId(3), confidence: 1.0, origin_stop: 1 });

        // Alternatives exhausted: fresh search over what is left.
        ledger.queries.insert(PassengerId(21), vec![0.0; 3]);
        ledger.order.push(PassengerId(21));
        let rec = rematch_from_alternatives(&mut ledger, &mut idx, PassengerId(21), 4, &[PassengerId(3)], &c).unwrap();
        assert_eq!(rec.gallery(), Some(PassengerId(1)));

        // Nothing eligible anywhere.
        ledger.queries.insert(PassengerId(22), vec![0.0; 3]);
        ledger.order.push(PassengerId(22));
        let rec = rematch_from_alternatives(&mut ledger, &mut idx, PassengerId(22), 4, &[], &c).unwrap();
        assert_eq!(rec.state, MatchState::Unmatched);
    }

    #[test]
    fn rematch_skips_held_ids() {
        let c = cfg();
        let mut idx = gallery(&[(1, [0.0; 3]), (2, [1.0, 0.0, 0.0]), (3, [2.0, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        ledger.queries.insert(PassengerId(20), vec![0.0; 3]);
        ledger.order.push(PassengerId(20));
        ledger.cold_holders.insert(PassengerId(2), PassengerId(99));
        let rec = rematch_from_alternatives(&mut ledger, &mut idx, PassengerId(20), 4, &[PassengerId(2), PassengerId(3)], &c).unwrap();
        assert_eq!(rec.gallery(), Some(PassengerId(3)));
    }

    #[test]
    fn final_update_promotes_cold_holds() {
        let mut idx = gallery(&[(1, [0.0; 3]), (2, [1.0, 0.0, 0.0]), (3, [9.0, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        for (q, g) in [(11, 1), (12, 2)] {
            ledger.order.push(PassengerId(q));
            ledger.cold_holders.insert(PassengerId(g), PassengerId(q));
            ledger.set(
                PassengerId(q),
                5,
                MatchState::Cold { temp_match: PassengerId(g), alternatives: vec![], confidence: 0.01 },
            );
        }
        final_update(&mut ledger, &mut idx).unwrap();
        assert_eq!(idx.size(), 1);
        assert_eq!(ledger.count_hot(), 2);
        assert!(ledger.cold_holders().is_empty());
        assert_eq!(ledger.record(PassengerId(12)).unwrap().gallery(), Some(PassengerId(2)));

        let before = idx.size();
        final_update(&mut ledger, &mut idx).unwrap();
        assert_eq!(idx.size(), before);
    }

    #[test]
    fn naive_mode_always_retires_rank_one() {
        let mut idx = gallery(&[(1, [0.0; 3]), (2, [0.1, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        let rec = naive_alighting(&mut ledger, &mut idx, PassengerId(5), &fv(&[0.05, 0.0, 0.0]), 2, &cfg()).unwrap();
        assert!(rec.is_hot());
        assert_eq!(idx.size(), 1);
    }

    #[test]
    fn export_rows_flag_correctness() {
        let mut idx = gallery(&[(1, [0.0; 3]), (2, [5.0, 0.0, 0.0])]);
        let mut ledger = MatchLedger::new();
        process_alighting(&mut ledger, &mut idx, PassengerId(1), &fv(&[0.0; 3]), 3, &cfg()).unwrap();
        process_alighting(&mut ledger, &mut idx, PassengerId(7), &fv(&[5.0, 0.0, 0.0]), 4, &cfg()).unwrap();
        let rows = ledger.export_rows(|q, g| q == g);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].state, "hot");
        assert!(rows[0].correct);
        assert_eq!(rows[0].origin_stop, Some(1));
        assert!(!rows[1].correct);
    }
}
