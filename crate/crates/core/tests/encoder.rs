//! Hand-unrolled forward passes compared against the graph encoder.

use ndarray::Array2;
use transagent::model::{
    init_prompts, Backbone, Block, ModelConfig, TextPool, TextualTokenSequence, VisualTokenSequence,
};
use transagent::seed;

type M = Vec<Vec<f64>>;

fn to_m(a: &Array2<f64>) -> M {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn mm(a: &M, b: &Array2<f64>) -> M {
    let (k, n) = b.dim();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for i in 0..k {
                        s += row[i] * b[[i, j]];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn block(h: &M, b: &Block, causal: bool) -> M {
    let d = h[0].len();
    let (q, k, v) = (mm(h, &b.wq), mm(h, &b.wk), mm(h, &b.wv));
    let n = h.len();
    let mut mixed = vec![vec![0.0; d]; n];
    for r in 0..n {
        let visible = if causal { r + 1 } else { n };
        let logits: Vec<f64> = (0..visible)
            .map(|c| q[r].iter().zip(&k[c]).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..visible {
            for t in 0..d {
                mixed[r][t] += e[c] / z * v[c][t];
            }
        }
    }
    let attn = mm(&mixed, &b.wo);
    let h1: M = h.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let hid: M = mm(&h1, &b.w1).into_iter().map(|r| r.into_iter().map(f64::tanh).collect()).collect();
    let m = mm(&hid, &b.w2);
    h1.iter().zip(&m).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn mean_rows(h: &M, rows: std::ops::Range<usize>) -> M {
    let n = rows.len() as f64;
    let mut out = vec![0.0; h[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(&h[r]) {
            *o += v / n;
        }
    }
    vec![out]
}

fn close(a: &M, b: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((v - b[[r, c]]).abs());
        }
    }
    worst
}

fn setup() -> (ModelConfig, Backbone) {
    let cfg = ModelConfig {
        depth: 2,
        width: 8,
        embed_width: 6,
        prompt_depth: 2,
        seed: 17,
        ..ModelConfig::default()
    };
    let bb = Backbone::new(&cfg).unwrap();
    (cfg, bb)
}

#[test]
fn four_token_image_matches_straight_line_forward() {
    let (cfg, bb) = setup();
    let mut prompts = init_prompts(&cfg, &bb).unwrap();
    let mut rng = seed::rng(1, "oracle/prompts");
    for p in &mut prompts.visual {
        *p += &seed::normal_matrix(&mut rng, p.nrows(), p.ncols(), 0.3);
    }
    let tokens = seed::normal_matrix(&mut rng, 4, cfg.width, 1.0);
    let seq = VisualTokenSequence::new(tokens.clone(), 0).unwrap();
    let (v, qv) = bb.encode_image(&seq, &prompts).unwrap();

    let n_ctx = cfg.n_ctx;
    let mut h: M = vec![vec![0.0; cfg.width]; n_ctx];
    h.extend(to_m(&tokens));
    for (j, blk) in bb.vision.blocks.iter().enumerate() {
        for k in 0..n_ctx {
            h[k] = prompts.visual[j].row(k).to_vec();
        }
        h = block(&h, blk, false);
    }
    let v_oracle = mm(&mean_rows(&h, n_ctx..n_ctx + 4), &bb.vision.proj);
    let q_oracle = mm(&mean_rows(&h, 0..n_ctx), &bb.vision.proj);
    assert!(close(&v_oracle, &v.values) < 1e-12);
    assert!(close(&q_oracle, &qv.values) < 1e-12);
}

#[test]
fn class_text_matches_straight_line_forward() {
    let (cfg, bb) = setup();
    let prompts = init_prompts(&cfg, &bb).unwrap();
    let mut rng = seed::rng(2, "oracle/text");
    let names = seed::normal_matrix(&mut rng, 2, cfg.width, 1.0);
    let seq = TextualTokenSequence::new(names.clone(), 0).unwrap();
    let (t_eos, qt) = bb.encode_text(std::slice::from_ref(&seq), &prompts, TextPool::Eos).unwrap();
    let (t_sos, _) = bb.encode_text(std::slice::from_ref(&seq), &prompts, TextPool::Sos).unwrap();

    let n_ctx = cfg.n_ctx;
    let mut h: M = vec![bb.sos.to_vec()];
    h.extend(to_m(&names));
    h.extend(vec![vec![0.0; cfg.width]; n_ctx]);
    h.push(bb.eos.to_vec());
    let last = h.len() - 1;
    for (j, blk) in bb.text.blocks.iter().enumerate() {
        for k in 0..n_ctx {
            h[3 + k] = prompts.textual[j].row(k).to_vec();
        }
        h = block(&h, blk, true);
    }
    assert!(close(&mm(&mean_rows(&h, last..last + 1), &bb.text.proj), &t_eos.values) < 1e-12);
    assert!(close(&mm(&mean_rows(&h, 0..1), &bb.text.proj), &t_sos.values) < 1e-12);
    assert!(close(&mm(&mean_rows(&h, 3..3 + n_ctx), &bb.text.proj), &qt.values) < 1e-12);
}

#[test]
fn batching_does_not_leak_across_images() {
    let (cfg, bb) = setup();
    let prompts = init_prompts(&cfg, &bb).unwrap();
    let mut rng = seed::rng(3, "oracle/batch");
    let seqs: Vec<VisualTokenSequence> = (0..3)
        .map(|i| VisualTokenSequence::new(seed::normal_matrix(&mut rng, 2 + i, cfg.width, 1.0), i as u64).unwrap())
        .collect();
    let (batch, _) = bb.encode_images(&seqs, &prompts).unwrap();
    for (i, s) in seqs.iter().enumerate() {
        let (one, _) = bb.encode_image(s, &prompts).unwrap();
        let diff = (&batch.values.row(i) - &one.values.row(0)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }
}
