use embdiff::decoding::{
    bleu, mbr_index, mbr_risks, mbr_select, parallel_decode, quality_dynamics, reverse_generate, top_lengths,
    DecodeCandidate, DecodeOptions,
};
use embdiff::denoiser::{DenoiserParameters, Model, ModelShape, Pair};
use embdiff::schedules::{build_schedule, ScheduleKind};

fn model(self_conditioning: bool) -> Model {
    let shape = ModelShape { vocab: 20, dim: 6, d_model: 12, n_max: 8, self_conditioning };
    let params = DenoiserParameters::init(shape, 1.0, 5).unwrap();
    Model::new(params, build_schedule(ScheduleKind::Sqrt, 50).unwrap())
}

fn candidate(tokens: &[usize]) -> DecodeCandidate {
    DecodeCandidate { tokens: tokens.to_vec(), length_beam_rank: 0, noise_seed: 0, risk: None, snapshots: None }
}

#[test]
fn single_beam_equals_reverse_generation() {
    let m = model(false);
    let source = [4, 9, 11, 5];
    let opts = DecodeOptions { k: 10, early_stop: 2, ..DecodeOptions::default() };
    let beam = parallel_decode(&m, &source, &opts, 3).unwrap();
    assert_eq!(beam.len(), 1);
    let length = top_lengths(&m, &source, 1).unwrap()[0];
    let single = reverse_generate(&m, &source, &opts, length, 3).unwrap();
    assert_eq!(beam[0], single);
    assert_eq!(single.tokens.len(), length);
}

#[test]
fn beams_cover_lengths_and_noise() {
    for sc in [false, true] {
        let m = model(sc);
        let source = [6, 7, 8];
        let opts = DecodeOptions { k: 5, early_stop: 0, b1: 3, b2: 2, sampling_factor: 1.0 };
        let cands = parallel_decode(&m, &source, &opts, 1).unwrap();
        assert_eq!(cands.len(), 6);
        let lengths = top_lengths(&m, &source, 3).unwrap();
        for (i, c) in cands.iter().enumerate() {
            assert_eq!(c.length_beam_rank, i / 2);
            assert_eq!(c.noise_seed, (i % 2) as u64);
            assert_eq!(c.tokens.len(), lengths[i / 2]);
        }
        assert_eq!(cands, parallel_decode(&m, &source, &opts, 1).unwrap());
    }
}

#[test]
fn options_are_validated() {
    let m = model(false);
    let bad = [
        DecodeOptions { k: 0, early_stop: 0, ..DecodeOptions::default() },
        DecodeOptions { k: 51, early_stop: 0, ..DecodeOptions::default() },
        DecodeOptions { k: 5, early_stop: 5, ..DecodeOptions::default() },
        DecodeOptions { b1: 0, ..DecodeOptions::default() },
        DecodeOptions { b1: 9, ..DecodeOptions::default() },
    ];
    for opts in bad {
        assert!(parallel_decode(&m, &[4, 5], &opts, 0).is_err(), "{opts:?}");
    }
    assert!(reverse_generate(&m, &[4], &DecodeOptions::default(), 0, 0).is_err());
}

#[test]
fn mbr_prefers_the_majority() {
    let a = [5, 6, 7, 8, 9];
    let b = [5, 6, 10, 11, 9];
    assert!(bleu(&a, &[&b], 4) < 100.0);
    let mut cands = vec![candidate(&a), candidate(&a), candidate(&b)];
    let best = mbr_select(&mut cands).unwrap();
    // brute-force pairwise risk table
    let seqs: Vec<&[usize]> = cands.iter().map(|c| c.tokens.as_slice()).collect();
    let mut brute = Vec::new();
    for i in 0..3 {
        let r: f64 = (0..3).filter(|&j| j != i).map(|j| 1.0 - bleu(seqs[i], &[seqs[j]], 4) / 100.0).sum::<f64>() / 2.0;
        brute.push(r);
    }
    assert_eq!(mbr_risks(&seqs), brute);
    assert_eq!(best, 0);
    assert!(cands.iter().all(|c| c.risk.is_some_and(f64::is_finite)));
}

#[test]
fn mbr_ties_and_singletons() {
    let mut one = vec![candidate(&[4, 5])];
    assert_eq!(mbr_select(&mut one).unwrap(), 0);
    let mut same = vec![candidate(&[4, 5, 6]); 4];
    assert_eq!(mbr_select(&mut same).unwrap(), 0);
    assert!(mbr_select(&mut []).is_err());
    assert_eq!(mbr_index(&[0.3, 0.1, 0.1]), Some(1));
}

#[test]
fn mbr_is_permutation_invariant() {
    let seqs: [&[usize]; 4] = [&[4, 5, 6, 7], &[4, 5, 6, 8], &[9, 5, 6, 7], &[4, 5, 6, 7, 7]];
    let base = {
        let mut c: Vec<_> = seqs.iter().map(|s| candidate(s)).collect();
        let i = mbr_select(&mut c).unwrap();
        c[i].tokens.clone()
    };
    for rot in 1..4 {
        let mut c: Vec<_> = (0..4).map(|i| candidate(seqs[(i + rot) % 4])).collect();
        let i = mbr_select(&mut c).unwrap();
        assert_eq!(c[i].tokens, base);
    }
}

#[test]
fn dynamics_curve_has_k_points() {
    let m = model(false);
    let pairs =
        vec![Pair { source: vec![4, 5, 6], target: vec![6, 5, 4] }, Pair { source: vec![7, 8], target: vec![8, 7] }];
    let curve = quality_dynamics(&m, &pairs, 8, 0).unwrap();
    assert_eq!(curve.len(), 8);
    assert_eq!(curve[0].t, 50);
    assert!(curve.windows(2).all(|w| w[0].t > w[1].t && w[1].step == w[0].step + 1));
    assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.token_accuracy)));
}
