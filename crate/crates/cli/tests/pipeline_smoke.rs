//! End-to-end pipeline through the binary: pretrain a miniature model, then
//! evaluate perplexity, dump attention, and finetune from its checkpoint.

use std::path::Path;
use std::process::Command;

use permlm_core::synth::{segment_overlap_dataset, synthetic_text, write_overlap_tsv};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_permlm")
}

fn run_ok(args: &[&str]) -> (String, String) {
    let out = Command::new(binary()).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "permlm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    (String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

#[test]
fn pretrain_eval_dump_finetune_chain() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, synthetic_text(30_000, 12)).unwrap();
    let config = dir.path().join("tiny.cfg");
    std::fs::write(
        &config,
        "n_layers = 1\nd_model = 32\nn_heads = 2\nhead_dim = 16\nffn_dim = 64\n\
         mem_len = 8\nseq_len = 16\nbatch_size = 2\ntotal_steps = 30\nwarmup_steps = 5\n\
         peak_lr = 2e-3\ncheckpoint_every = 30\ndropout = 0\nattn_dropout = 0\n",
    )
    .unwrap();
    let run_dir = dir.path().join("run");

    run_ok(&[
        "pretrain",
        "--objective",
        "plm",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--seed",
        "4",
        corpus.to_str().unwrap(),
    ]);
    let ckpt = run_dir.join("ckpt-30.xlnt");
    let vocab = run_dir.join("vocab.txt");
    assert!(ckpt.exists() && vocab.exists());
    let metrics = std::fs::read_to_string(run_dir.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 30);

    // perplexity on held-out text is a positive finite number on stdout
    let heldout = dir.path().join("heldout.txt");
    std::fs::write(&heldout, synthetic_text(2_000, 77)).unwrap();
    let (stdout, _) = run_ok(&[
        "eval-ppl",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        heldout.to_str().unwrap(),
    ]);
    let ppl: f64 = stdout.trim().strip_prefix("perplexity\t").unwrap().parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);

    // attention dumps: one file per (layer, head), rows sum to one
    let attn_dir = dir.path().join("attn");
    run_ok(&[
        "dump-attention",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--text",
        "the river",
        "--out",
        attn_dir.to_str().unwrap(),
    ]);
    for h in 0..2 {
        let body = std::fs::read_to_string(attn_dir.join(format!("layer0.head{h}.txt"))).unwrap();
        let rows: Vec<&str> = body.lines().collect();
        assert_eq!(rows.len(), "the river".len());
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.split(' ').map(|x| x.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {i} of head {h} sums to {sum}");
        }
    }

    // finetuning through the binary: a short run must execute and report
    let train_tsv = dir.path().join("train.tsv");
    let eval_tsv = dir.path().join("eval.tsv");
    write_overlap_tsv(&train_tsv, &segment_overlap_dataset(200, 4, 1)).unwrap();
    write_overlap_tsv(&eval_tsv, &segment_overlap_dataset(40, 4, 2)).unwrap();
    let ft_dir = dir.path().join("ft");
    let (stdout, _) = run_ok(&[
        "finetune",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--train",
        train_tsv.to_str().unwrap(),
        "--eval",
        eval_tsv.to_str().unwrap(),
        "--out",
        ft_dir.to_str().unwrap(),
        "--steps",
        "20",
        "--batch-size",
        "8",
    ]);
    let acc: f64 = stdout.trim().strip_prefix("eval_accuracy\t").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(ft_dir.join("finetuned.xlnt").exists());

    // the finetuned checkpoint loads back
    let loaded = permlm_core::checkpoint::load(Path::new(&ft_dir.join("finetuned.xlnt"))).unwrap();
    assert!(loaded.contains_key("cls.w"));
}
