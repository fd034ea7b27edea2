//! Discerning query selection: merge C3/C4/C5 into one aggregated map,
//! score every location as glass vs background with a 2-way softmax, rank
//! all `2hw` confidence scores and gather the feature vectors under the
//! top-k as initial decoder queries.
//!
//! Channel 0 is background, channel 1 is glass. The score vector `S` is the
//! channel-major flattening of `P in [2, h, w]`, so both channels of one
//! location compete independently and may both be selected.

use ndarray::Array3;

use crate::autodiff::Var;
use crate::config::{RunConfig, SelectionSource};
use crate::error::{Error, Result};
use crate::nn::{flatten_grid, ParamStore, Session};
use crate::pyramid::FeaturePyramid;

/// Confidence map over one feature grid.
#[derive(Debug, Clone, Copy)]
pub struct ConfidenceMap {
    /// `[h*w, 2]` raw scores.
    pub logits: Var,
    /// `[h*w, 2]` per-location softmax.
    pub probs: Var,
    pub h: usize,
    pub w: usize,
}

impl ConfidenceMap {
    /// Probabilities as `[2, h, w]`.
    pub fn p_array(&self, sess: &Session) -> Array3<f64> {
        let p = crate::nn::value2(&sess.tape, self.probs);
        Array3::from_shape_fn((2, self.h, self.w), |(c, y, x)| p[(y * self.w + x, c)])
    }

    /// The flattened score vector `S` of length `2hw` (channel-major).
    pub fn scores(&self, sess: &Session) -> Vec<f64> {
        let p = crate::nn::value2(&sess.tape, self.probs);
        let hw = self.h * self.w;
        let mut s = vec![0.0; 2 * hw];
        for loc in 0..hw {
            s[loc] = p[(loc, 0)];
            s[hw + loc] = p[(loc, 1)];
        }
        s
    }
}

/// Top-k selection over a score vector.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Flattened positions into the score vector, score-descending.
    pub indices: Vec<usize>,
    /// Spatial `(row, col)` of each selected score in its source grid.
    pub locations: Vec<(usize, usize)>,
    /// `[k, d]` feature vectors gathered at the selected locations.
    pub queries: Var,
    /// Selected scores, non-increasing.
    pub scores: Vec<f64>,
}

/// Register selection parameters: the merged-map head always exists (it also
/// carries the auxiliary confidence loss); per-level heads exist only for
/// the alternative selection sources.
pub fn init_params(store: &mut ParamStore, cfg: &RunConfig) {
    let d = cfg.d_model;
    store.init_linear(cfg.seed, "dqs.head", d, 2);
    match cfg.selection_source {
        SelectionSource::Dqs => {}
        SelectionSource::C3 => store.init_linear(cfg.seed, "sel.c3", d, 2),
        SelectionSource::C4 => store.init_linear(cfg.seed, "sel.c4", d, 2),
        SelectionSource::C3C4C5 => {
            store.init_linear(cfg.seed, "sel.c3", d, 2);
            store.init_linear(cfg.seed, "sel.c4", d, 2);
            store.init_linear(cfg.seed, "sel.c5", d, 2);
        }
    }
}

/// `f = down2(C3) + C4 + up2(C5)` at the C4 resolution.
pub fn aggregate(sess: &mut Session, pyr: &FeaturePyramid) -> Result<Var> {
    let s3 = sess.tape.shape(pyr.c3).to_vec();
    let s4 = sess.tape.shape(pyr.c4).to_vec();
    let s5 = sess.tape.shape(pyr.c5).to_vec();
    if s3[0] != 2 * s4[0] || s3[1] != 2 * s4[1] || s4[0] != 2 * s5[0] || s4[1] != 2 * s5[1] {
        return Err(Error::Shape(format!(
            "pyramid scales inconsistent: C3 {s3:?}, C4 {s4:?}, C5 {s5:?}"
        )));
    }
    let down = sess.tape.avg_pool2(pyr.c3);
    let up = sess.tape.bilinear(pyr.c5, s4[0], s4[1]);
    let sum = sess.tape.add(down, pyr.c4);
    Ok(sess.tape.add(sum, up))
}

/// Score a feature grid with a named 2-channel head.
fn classify_with(sess: &mut Session, head: &str, f: Var) -> ConfidenceMap {
    let shape = sess.tape.shape(f).to_vec();
    let (h, w) = (shape[0], shape[1]);
    let grid = sess.conv1x1(head, f);
    let logits = sess.tape.reshape(grid, &[h * w, 2]);
    let probs = sess.tape.softmax_rows(logits);
    ConfidenceMap { logits, probs, h, w }
}

/// Score the aggregated feature with the merged-map head.
pub fn classify(sess: &mut Session, f: Var) -> ConfidenceMap {
    classify_with(sess, "dqs.head", f)
}

/// Stable top-k over raw scores: score-descending, ties by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Select the features under the k largest confidence scores.
pub fn select_topk(
    sess: &mut Session,
    cm: &ConfidenceMap,
    f: Var,
    k: usize,
) -> Result<SelectionResult> {
    select_topk_opts(sess, cm, f, k, false)
}

/// As [`select_topk`], with an optional dedup pass that skips a score whose
/// spatial location was already taken by the other channel.
pub fn select_topk_opts(
    sess: &mut Session,
    cm: &ConfidenceMap,
    f: Var,
    k: usize,
    dedup_locations: bool,
) -> Result<SelectionResult> {
    let hw = cm.h * cm.w;
    let max = 2 * hw;
    if k == 0 || k > max {
        return Err(Error::TopKRange { k, max });
    }
    let scores = cm.scores(sess);
    let ranked = top_k_indices(&scores, max);
    let mut indices = Vec::with_capacity(k);
    let mut seen = vec![false; hw];
    for idx in ranked {
        let loc = idx % hw;
        if dedup_locations {
            if seen[loc] {
                continue;
            }
            seen[loc] = true;
        }
        indices.push(idx);
        if indices.len() == k {
            break;
        }
    }
    if indices.len() < k {
        return Err(Error::TopKRange { k, max: hw });
    }
    let locations: Vec<(usize, usize)> = indices
        .iter()
        .map(|&i| ((i % hw) / cm.w, (i % hw) % cm.w))
        .collect();
    let spatial: Vec<usize> = indices.iter().map(|&i| i % hw).collect();
    let flat = flatten_grid(&mut sess.tape, f);
    let queries = sess.tape.gather_rows(flat, &spatial);
    let selected_scores = indices.iter().map(|&i| scores[i]).collect();
    Ok(SelectionResult {
        indices,
        locations,
        queries,
        scores: selected_scores,
    })
}

/// Alternative selection sources: score one level with its own head, or all
/// three levels with the concatenated score vector (gathering each selected
/// feature from its originating level).
pub fn alt_select(
    sess: &mut Session,
    pyr: &FeaturePyramid,
    mode: SelectionSource,
    k: usize,
) -> Result<SelectionResult> {
    match mode {
        SelectionSource::Dqs => Err(Error::Invalid(
            "alt_select handles c3|c4|c3c4c5; use classify + select_topk for the merged map".into(),
        )),
        SelectionSource::C3 => {
            let cm = classify_with(sess, "sel.c3", pyr.c3);
            select_topk(sess, &cm, pyr.c3, k)
        }
        SelectionSource::C4 => {
            let cm = classify_with(sess, "sel.c4", pyr.c4);
            select_topk(sess, &cm, pyr.c4, k)
        }
        SelectionSource::C3C4C5 => {
            let levels = [pyr.c3, pyr.c4, pyr.c5];
            let heads = ["sel.c3", "sel.c4", "sel.c5"];
            let mut maps = Vec::new();
            let mut all_scores = Vec::new();
            let mut offsets = Vec::new();
            for (lvl, head) in levels.iter().zip(heads) {
                let cm = classify_with(sess, head, *lvl);
                offsets.push(all_scores.len());
                all_scores.extend(cm.scores(sess));
                maps.push(cm);
            }
            if k == 0 || k > all_scores.len() {
                return Err(Error::TopKRange {
                    k,
                    max: all_scores.len(),
                });
            }
            let chosen = top_k_indices(&all_scores, k);
            let mut indices = Vec::with_capacity(k);
            let mut locations = Vec::with_capacity(k);
            let mut scores = Vec::with_capacity(k);
            let mut per_level_rows: Vec<Vec<usize>> = vec![Vec::new(); 3];
            let mut gather_order = Vec::with_capacity(k);
            for &g in &chosen {
                let level = match offsets.binary_search(&g) {
                    Ok(i) => i,
                    Err(i) => i - 1,
                };
                let cm = &maps[level];
                let hw = cm.h * cm.w;
                let local = g - offsets[level];
                let loc = local % hw;
                indices.push(g);
                locations.push((loc / cm.w, loc % cm.w));
                scores.push(all_scores[g]);
                gather_order.push((level, per_level_rows[level].len()));
                per_level_rows[level].push(loc);
            }
            // Gather per level, then restore the global score ordering.
            let mut gathered = Vec::new();
            for (i, lvl) in levels.iter().enumerate() {
                if per_level_rows[i].is_empty() {
                    gathered.push(None);
                    continue;
                }
                let flat = flatten_grid(&mut sess.tape, *lvl);
                gathered.push(Some(sess.tape.gather_rows(flat, &per_level_rows[i])));
            }
            let rows: Vec<Var> = gather_order
                .iter()
                .map(|&(level, row)| {
                    let g = gathered[level].expect("level gathered");
                    sess.tape.gather_rows(g, &[row])
                })
                .collect();
            let queries = sess.tape.concat_rows(&rows);
            Ok(SelectionResult {
                indices,
                locations,
                queries,
                scores,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{leaf3, value2};
    use ndarray::{Array1, Array2, Array3};
    use rand::Rng;

    fn manual_head(store: &mut ParamStore, name: &str, w: Array2<f64>, b: Array1<f64>) {
        store.insert(&format!("{name}.w"), w.into_dyn());
        store.insert(&format!("{name}.b"), b.into_dyn());
    }

    #[test]
    fn aggregate_of_zeros_is_zero_and_constants_add() {
        let mut store = ParamStore::new();
        store.init_linear(0, "dqs.head", 4, 2);
        let mut sess = Session::new(&store);
        let pyr = FeaturePyramid {
            c2: leaf3(&mut sess.tape, Array3::zeros((8, 8, 4))),
            c3: leaf3(&mut sess.tape, Array3::zeros((4, 4, 4))),
            c4: leaf3(&mut sess.tape, Array3::zeros((2, 2, 4))),
            c5: leaf3(&mut sess.tape, Array3::zeros((1, 1, 4))),
        };
        let f = aggregate(&mut sess, &pyr).unwrap();
        assert!(sess.tape.value(f).iter().all(|&v| v == 0.0));

        let mut sess = Session::new(&store);
        let pyr = FeaturePyramid {
            c2: leaf3(&mut sess.tape, Array3::zeros((8, 8, 4))),
            c3: leaf3(&mut sess.tape, Array3::from_elem((4, 4, 4), 0.3)),
            c4: leaf3(&mut sess.tape, Array3::from_elem((2, 2, 4), 0.5)),
            c5: leaf3(&mut sess.tape, Array3::from_elem((1, 1, 4), -0.1)),
        };
        let f = aggregate(&mut sess, &pyr).unwrap();
        for &v in sess.tape.value(f).iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_matches_brute_force_resampling() {
        let mut store = ParamStore::new();
        store.init_linear(0, "dqs.head", 2, 2);
        let mut rng = crate::util::seeded_rng(2, "agg");
        let c3 = Array3::from_shape_fn((4, 4, 2), |_| rng.gen_range(-1.0..1.0f64));
        let c4 = Array3::from_shape_fn((2, 2, 2), |_| rng.gen_range(-1.0..1.0f64));
        let c5 = Array3::from_shape_fn((1, 1, 2), |_| rng.gen_range(-1.0..1.0f64));
        let mut sess = Session::new(&store);
        let pyr = FeaturePyramid {
            c2: leaf3(&mut sess.tape, Array3::zeros((8, 8, 2))),
            c3: leaf3(&mut sess.tape, c3.clone()),
            c4: leaf3(&mut sess.tape, c4.clone()),
            c5: leaf3(&mut sess.tape, c5.clone()),
        };
        let f = aggregate(&mut sess, &pyr).unwrap();
        let fv = crate::nn::value3(&sess.tape, f);
        // Oracle: 2x2 average pool of C3 plus C4 plus bilinear x2 of C5. With a
        // single C5 cell every upsampled tap lands on that cell.
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..2 {
                    let pool = 0.25
                        * (c3[(2 * y, 2 * x, c)]
                            + c3[(2 * y, 2 * x + 1, c)]
                            + c3[(2 * y + 1, 2 * x, c)]
                            + c3[(2 * y + 1, 2 * x + 1, c)]);
                    let expect = pool + c4[(y, x, c)] + c5[(0, 0, c)];
                    assert!((fv[(y, x, c)] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn classify_zero_head_gives_uniform_probabilities() {
        let mut store = ParamStore::new();
        manual_head(&mut store, "dqs.head", Array2::zeros((3, 2)), Array1::zeros(2));
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, Array3::from_elem((2, 3, 3), 1.4));
        let cm = classify(&mut sess, f);
        let p = cm.p_array(&sess);
        for v in p.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        // Normalization invariant.
        for y in 0..2 {
            for x in 0..3 {
                assert!((p[(0, y, x)] + p[(1, y, x)] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn classify_two_zero_logits_evaluate_softmax() {
        // f = [1, 0], head weight maps it to logits (2, 0).
        let mut store = ParamStore::new();
        manual_head(
            &mut store,
            "dqs.head",
            ndarray::array![[2.0, 0.0], [0.0, 0.0]],
            Array1::zeros(2),
        );
        let mut sess = Session::new(&store);
        let mut grid = Array3::zeros((1, 1, 2));
        grid[(0, 0, 0)] = 1.0;
        let f = leaf3(&mut sess.tape, grid);
        let cm = classify(&mut sess, f);
        let p = cm.p_array(&sess);
        assert!((p[(0, 0, 0)] - 0.8808).abs() < 5e-5);
        assert!((p[(1, 0, 0)] - 0.1192).abs() < 5e-5);
    }

    #[test]
    fn classify_is_invariant_to_common_logit_shifts() {
        let mut store = ParamStore::new();
        store.init_linear(3, "dqs.head", 4, 2);
        let mut rng = crate::util::seeded_rng(4, "shift");
        let grid = Array3::from_shape_fn((2, 2, 4), |_| rng.gen_range(-1.0..1.0f64));
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, grid.clone());
        let cm = classify(&mut sess, f);
        let base = cm.p_array(&sess);
        let sel = select_topk(&mut sess, &cm, f, 3).unwrap();

        // Shift both channel biases by the same constant.
        let mut store2 = store.clone();
        store2
            .get_mut("dqs.head.b")
            .mapv_inplace(|v| v + 11.3);
        let mut sess2 = Session::new(&store2);
        let f2 = leaf3(&mut sess2.tape, grid);
        let cm2 = classify(&mut sess2, f2);
        let shifted = cm2.p_array(&sess2);
        for (a, b) in base.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let sel2 = select_topk(&mut sess2, &cm2, f2, 3).unwrap();
        assert_eq!(sel.indices, sel2.indices);
    }

    fn single_location_setup() -> (ParamStore, Array3<f64>) {
        let mut store = ParamStore::new();
        manual_head(
            &mut store,
            "dqs.head",
            ndarray::array![[1.0, -1.0], [0.5, 0.5]],
            Array1::zeros(2),
        );
        let grid = Array3::from_shape_fn((1, 1, 2), |(_, _, c)| c as f64 + 0.5);
        (store, grid)
    }

    #[test]
    fn topk_on_single_location() {
        let (store, grid) = single_location_setup();
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, grid);
        let cm = classify(&mut sess, f);
        let sel = select_topk(&mut sess, &cm, f, 1).unwrap();
        assert_eq!(sel.locations, vec![(0, 0)]);
        assert_eq!(sel.indices.len(), 1);
    }

    #[test]
    fn exhaustive_k_selects_every_index_once() {
        let mut store = ParamStore::new();
        store.init_linear(7, "dqs.head", 3, 2);
        let mut rng = crate::util::seeded_rng(8, "exhaustive");
        let grid = Array3::from_shape_fn((3, 4, 3), |_| rng.gen_range(-1.0..1.0f64));
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, grid);
        let cm = classify(&mut sess, f);
        let sel = select_topk(&mut sess, &cm, f, 24).unwrap();
        let mut sorted = sel.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..24).collect::<Vec<_>>());
        // k out of range errors.
        assert!(select_topk(&mut sess, &cm, f, 25).is_err());
        assert!(select_topk(&mut sess, &cm, f, 0).is_err());
    }

    #[test]
    fn topk_matches_brute_force_sort_of_all_scores() {
        // Foreground channel (0.9, 0.2, 0.6, 0.4) on a 2x2 map; the oracle is
        // a full sort of all 2hw scores including the complementary channel.
        let fg: [f64; 4] = [0.9, 0.2, 0.6, 0.4];
        let mut store = ParamStore::new();
        // Head reproduces per-location logits whose softmax equals (1-p, p):
        // logit_1 - logit_0 = ln(p/(1-p)); encode via f = [l0, l1] identity head.
        manual_head(
            &mut store,
            "dqs.head",
            ndarray::array![[1.0, 0.0], [0.0, 1.0]],
            Array1::zeros(2),
        );
        let mut grid = Array3::<f64>::zeros((2, 2, 2));
        for (i, &p) in fg.iter().enumerate() {
            let (y, x) = (i / 2, i % 2);
            grid[(y, x, 1)] = (p / (1.0 - p)).ln();
        }
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, grid);
        let cm = classify(&mut sess, f);
        let scores = cm.scores(&sess);
        let oracle = top_k_indices(&scores, 2);
        let sel = select_topk(&mut sess, &cm, f, 2).unwrap();
        assert_eq!(sel.indices, oracle);
        // Background of location 1 is 0.8, which outranks the 0.6 foreground:
        // selected spatial locations are 0 (fg 0.9) and 1 (bg 0.8).
        assert_eq!(sel.locations, vec![(0, 0), (0, 1)]);
        assert!((sel.scores[0] - 0.9).abs() < 1e-9);
        assert!((sel.scores[1] - 0.8).abs() < 1e-9);
        // With a tamer complementary channel the intended reading holds: the
        // locations of 0.9 and 0.6 win.
        let fg2: [f64; 4] = [0.9, 0.45, 0.6, 0.48];
        let mut grid2 = Array3::<f64>::zeros((2, 2, 2));
        for (i, &p) in fg2.iter().enumerate() {
            grid2[(i / 2, i % 2, 1)] = (p / (1.0 - p)).ln();
        }
        let mut sess2 = Session::new(&store);
        let f2 = leaf3(&mut sess2.tape, grid2);
        let cm2 = classify(&mut sess2, f2);
        let sel2 = select_topk(&mut sess2, &cm2, f2, 2).unwrap();
        assert_eq!(sel2.locations, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn gathered_queries_equal_feature_rows() {
        let mut store = ParamStore::new();
        store.init_linear(1, "dqs.head", 3, 2);
        let mut rng = crate::util::seeded_rng(10, "gather");
        let grid = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0f64));
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, grid.clone());
        let cm = classify(&mut sess, f);
        let sel = select_topk(&mut sess, &cm, f, 5).unwrap();
        let q = value2(&sess.tape, sel.queries);
        for (row, &(y, x)) in sel.locations.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(q[(row, c)], grid[(y, x, c)]);
            }
        }
        // Scores are non-increasing.
        for wpair in sel.scores.windows(2) {
            assert!(wpair[0] >= wpair[1]);
        }
    }

    #[test]
    fn dedup_skips_repeat_locations() {
        let mut store = ParamStore::new();
        manual_head(
            &mut store,
            "dqs.head",
            ndarray::array![[1.0, 0.0], [0.0, 1.0]],
            Array1::zeros(2),
        );
        // One location dominates both channels.
        let mut grid = Array3::zeros((1, 2, 2));
        grid[(0, 0, 0)] = 0.1;
        grid[(0, 0, 1)] = 0.2;
        let mut sess = Session::new(&store);
        let f = leaf3(&mut sess.tape, grid);
        let cm = classify(&mut sess, f);
        let plain = select_topk_opts(&mut sess, &cm, f, 2, false).unwrap();
        assert_eq!(plain.locations[0], plain.locations[1]);
        let dedup = select_topk_opts(&mut sess, &cm, f, 2, true).unwrap();
        assert_ne!(dedup.locations[0], dedup.locations[1]);
    }

    fn alt_pyramid(sess: &mut Session, seed: u64) -> (FeaturePyramid, [Array3<f64>; 3]) {
        let mut rng = crate::util::seeded_rng(seed, "alt");
        let c3 = Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0f64));
        let c4 = Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-1.0..1.0f64));
        let c5 = Array3::from_shape_fn((1, 1, 3), |_| rng.gen_range(-1.0..1.0f64));
        let pyr = FeaturePyramid {
            c2: leaf3(&mut sess.tape, Array3::zeros((8, 8, 3))),
            c3: leaf3(&mut sess.tape, c3.clone()),
            c4: leaf3(&mut sess.tape, c4.clone()),
            c5: leaf3(&mut sess.tape, c5.clone()),
        };
        (pyr, [c3, c4, c5])
    }

    fn alt_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.init_linear(0, "dqs.head", 3, 2);
        store.init_linear(0, "sel.c3", 3, 2);
        store.init_linear(0, "sel.c4", 3, 2);
        store.init_linear(0, "sel.c5", 3, 2);
        store
    }

    #[test]
    fn alt_c4_with_k_hw_takes_every_location() {
        let store = alt_store();
        let mut sess = Session::new(&store);
        let (pyr, _) = alt_pyramid(&mut sess, 3);
        let sel = alt_select(&mut sess, &pyr, SelectionSource::C4, 4).unwrap();
        let mut locs = sel.locations.clone();
        locs.sort_unstable();
        locs.dedup();
        assert_eq!(locs.len(), 4);
    }

    #[test]
    fn alt_c3_uniform_scores_break_ties_by_index() {
        let mut store = ParamStore::new();
        store.init_linear(0, "dqs.head", 3, 2);
        manual_head(&mut store, "sel.c3", Array2::zeros((3, 2)), Array1::zeros(2));
        let mut sess = Session::new(&store);
        let (pyr, _) = alt_pyramid(&mut sess, 5);
        let sel = alt_select(&mut sess, &pyr, SelectionSource::C3, 3).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
    }

    #[test]
    fn alt_concat_picks_a_dominant_c5_location_first() {
        let mut store = ParamStore::new();
        store.init_linear(0, "dqs.head", 3, 2);
        manual_head(&mut store, "sel.c3", Array2::zeros((3, 2)), Array1::zeros(2));
        manual_head(&mut store, "sel.c4", Array2::zeros((3, 2)), Array1::zeros(2));
        // C5 head pushes channel 1 hard wherever feature 0 is large.
        manual_head(
            &mut store,
            "sel.c5",
            ndarray::array![[0.0, 10.0], [0.0, 0.0], [0.0, 0.0]],
            Array1::zeros(2),
        );
        let mut sess = Session::new(&store);
        let mut rng = crate::util::seeded_rng(6, "dominant");
        let c3 = Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-0.1..0.1f64));
        let c4 = Array3::from_shape_fn((2, 2, 3), |_| rng.gen_range(-0.1..0.1f64));
        let mut c5 = Array3::zeros((1, 1, 3));
        c5[(0, 0, 0)] = 1.0;
        let pyr = FeaturePyramid {
            c2: leaf3(&mut sess.tape, Array3::zeros((8, 8, 3))),
            c3: leaf3(&mut sess.tape, c3.clone()),
            c4: leaf3(&mut sess.tape, c4),
            c5: leaf3(&mut sess.tape, c5.clone()),
        };
        let sel = alt_select(&mut sess, &pyr, SelectionSource::C3C4C5, 1).unwrap();
        // Oracle: brute-force over the concatenated scores. Levels contribute
        // 32 + 8 + 2 scores; the dominant C5 glass score is global index
        // 32 + 8 + 1 (channel-major within the level).
        assert_eq!(sel.indices, vec![41]);
        assert_eq!(sel.locations, vec![(0, 0)]);
        let q = value2(&sess.tape, sel.queries);
        for c in 0..3 {
            assert_eq!(q[(0, c)], c5[(0, 0, c)]);
        }
    }
}
