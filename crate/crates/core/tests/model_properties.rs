mod common;

use common::props::normalization_sweep;
use common::{tiny_config, toks};
use copygec::corpus::{SentencePair, Vocabulary, BOS, PAD};
use copygec::model::{CopyGecModel, Graph, IdBatch};
use copygec::objectives::TrainBatch;

#[test]
fn mixture_is_normalized_and_alpha_is_open_interval() {
    let r = normalization_sweep(100);
    assert!(r.worst_mass_error < 1e-6, "mass error {}", r.worst_mass_error);
    assert!(r.alpha_min > 0.0 && r.alpha_max < 1.0, "alpha range [{}, {}]", r.alpha_min, r.alpha_max);
}

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(toks("a b c d e f g h")).unwrap()
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10)
}

#[test]
fn padding_does_not_change_unpadded_rows() {
    let v = vocab();
    let model = CopyGecModel::new(tiny_config(v.len()), 3).unwrap();
    let srcs = [v.encode(&toks("a b c d e")), v.encode(&toks("f g"))];
    let prefixes = [vec![BOS, 5, 6, 7], vec![BOS, 8]];
    let batched = model.decode_step(&IdBatch::from_rows(&srcs, PAD).unwrap(), &IdBatch::from_rows(&prefixes, PAD).unwrap()).unwrap();
    for b in 0..2 {
        let single = model.decode_step(&IdBatch::single(srcs[b].clone()).unwrap(), &IdBatch::single(prefixes[b].clone()).unwrap()).unwrap().remove(0);
        assert!(close(&batched[b].p_gen, &single.p_gen), "row {b} p_gen differs");
        assert!(close(&batched[b].p_copy[..srcs[b].len()], &single.p_copy), "row {b} p_copy differs");
        assert!(batched[b].p_copy[srcs[b].len()..].iter().all(|&p| p == 0.0), "padding received copy mass");
        assert!((batched[b].alpha - single.alpha).abs() < 1e-10);
    }
}

#[test]
fn decoder_is_causal() {
    let v = vocab();
    let model = CopyGecModel::new(tiny_config(v.len()), 4).unwrap();
    let src = IdBatch::single(v.encode(&toks("a b c"))).unwrap();
    let short = model.decode_step(&src, &IdBatch::single(vec![BOS, 5]).unwrap()).unwrap().remove(0);
    let mut g = Graph::eval();
    let long = IdBatch::single(vec![BOS, 5, 9, 10]).unwrap();
    let out = model.forward(&mut g, Some(&src), &long, None).unwrap();
    let nv = v.len();
    assert!(close(&g.tape.value(out.dec.p_gen)[nv..2 * nv], &short.p_gen));
}

#[test]
fn identity_rows_ignore_the_source_on_the_decoder_path_only() {
    let v = vocab();
    let model = CopyGecModel::new(tiny_config(v.len()), 5).unwrap();
    let edited = SentencePair::new(toks("a b c"), toks("a c c"), &v);
    let run = |ident: &[&str]| {
        let id = SentencePair::identity(toks(&ident.join(" ")), &v);
        let mut id_other_src = id.clone();
        id_other_src.src_ids = v.encode(&toks("h h h"));
        id_other_src.src_tokens = toks("h h h");
        let out_for = |p: &SentencePair| {
            let batch = TrainBatch::build(&[&edited, p], 1.0, true).unwrap();
            let mut g = Graph::eval();
            let out = model.forward(&mut g, Some(&batch.src), &batch.trg_in, Some(&batch.cross_keep)).unwrap();
            (g.tape.value(out.dec.p_gen).to_vec(), g.tape.value(out.alpha.unwrap()).to_vec())
        };
        (out_for(&id), out_for(&id_other_src))
    };
    let ((pg_a, al_a), (pg_b, al_b)) = run(&["d", "e", "f"]);
    let half = pg_a.len() / 2;
    assert!(close(&pg_a[..half], &pg_b[..half]), "edited row changed with its neighbour");
    assert!(close(&pg_a[half..], &pg_b[half..]), "identity row's generation path saw the source");
    assert!(!close(&al_a[al_a.len() / 2..], &al_b[al_b.len() / 2..]), "copy path should still read the source");
}
