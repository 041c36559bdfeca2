use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asrfuse::lm::TableLm;
use asrfuse::Vocabulary;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asrfuse"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn asrfuse")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "asrfuse {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path, epsilon: f64, utts: usize) {
    let eps = format!("epsilon={epsilon}");
    let n = utts.to_string();
    ok(&["synth", "--out", "c", "--utts", &n, "--lm-sentences", "1500", "--set", &eps, "--set", "seed=5"], dir);
    ok(&["lm-train", "--text", "c/lm_text.txt", "--vocab", "c/vocab.txt", "--order", "3", "--out", "lm.txt"], dir);
}

fn read(p: PathBuf) -> Vec<u8> {
    fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn nbest_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir.join("nbest"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), read(p))
        })
        .collect();
    v.sort();
    v
}

const JOINT: &[&str] = &[
    "--set", "corpus=c", "--set", "strategy=joint", "--set", "beam=4",
    "--set", "lm.path=lm.txt", "--set", "lm.weight=0.5",
];

#[test]
fn clean_corpus_greedy_is_error_free() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.0, 20);
    let out = ok(&["decode", "--set", "corpus=c", "--set", "out=g", "--set", "strategy=ctc-greedy"], tmp.path());
    assert!(out.contains("WER 0.00%"), "{out}");
    let wer = ok(&["wer", "--ref", "c/refs.txt", "--hyp", "g/hyps.txt"], tmp.path());
    assert!(wer.starts_with("WER 0.00%"), "{wer}");
}

#[test]
fn topk_all_matches_unpruned_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.3, 8);
    let v = Vocabulary::read(tmp.path().join("c/vocab.txt")).unwrap().len();
    let k = format!("topk={v}");
    ok(&[&["decode", "--set", "out=plain"], JOINT].concat(), tmp.path());
    ok(&[&["decode", "--set", "out=kv", "--set", &k], JOINT].concat(), tmp.path());
    ok(&[&["decode", "--set", "out=tau", "--set", "tau=1.5"], JOINT].concat(), tmp.path());
    let plain = nbest_files(&tmp.path().join("plain"));
    assert_eq!(plain.len(), 8);
    assert_eq!(plain, nbest_files(&tmp.path().join("kv")));
    assert_eq!(plain, nbest_files(&tmp.path().join("tau")));
    assert_eq!(read(tmp.path().join("plain/hyps.txt")), read(tmp.path().join("kv/hyps.txt")));
}

#[test]
fn reruns_and_job_counts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.3, 10);
    ok(&[&["decode", "--set", "out=a", "--set", "jobs=1"], JOINT].concat(), tmp.path());
    ok(&[&["decode", "--set", "out=b", "--set", "jobs=3"], JOINT].concat(), tmp.path());
    ok(&[&["decode", "--set", "out=c2", "--set", "jobs=1"], JOINT].concat(), tmp.path());
    let a = tmp.path().join("a");
    for other in ["b", "c2"] {
        let o = tmp.path().join(other);
        assert_eq!(nbest_files(&a), nbest_files(&o));
        assert_eq!(read(a.join("hyps.txt")), read(o.join("hyps.txt")));
        assert_eq!(read(a.join("wer.txt")), read(o.join("wer.txt")));
    }
    // timing lives in stats.txt only; the snapshot records the run
    let snap = String::from_utf8(read(a.join("config.toml"))).unwrap();
    assert!(snap.contains("strategy = \"joint\""));
    assert!(fs::read_to_string(a.join("stats.txt")).unwrap().contains("rtf\t"));
}

#[test]
fn missing_posteriorgram_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.1, 3);
    fs::remove_file(tmp.path().join("c/pg/utt00001.fkpg")).unwrap();
    let out = run(&["decode", "--set", "corpus=c", "--set", "out=x"], tmp.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("utt00001.fkpg"), "{err}");
    assert!(!tmp.path().join("x").exists(), "nothing decoded after a failed check");
}

#[test]
fn invalid_config_rejected_before_decoding() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.1, 2);
    for bad in ["beam=0", "strategy=delayed", "nope=1", "lm.path=missing.txt"] {
        let out = run(&["decode", "--set", "corpus=c", "--set", "out=x", "--set", bad], tmp.path());
        assert!(!out.status.success(), "{bad} accepted");
    }
    let out = run(&["decode", "--set", "corpus=c", "--set", "out=x", "--set", "lm.path=missing.txt"], tmp.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));
}

#[test]
fn uniform_table_ppl_is_outcome_count() {
    let tmp = tempfile::tempdir().unwrap();
    // 8 words + <unk> + EOS = 10 outcomes
    let words = ["a", "b", "c", "d", "e", "f", "g", "h"];
    let v = Vocabulary::from_words(&words).unwrap();
    assert_eq!(v.outcome_ids().len(), 10);
    v.write(tmp.path().join("vocab.txt")).unwrap();
    TableLm::uniform(v).write(tmp.path().join("u.json")).unwrap();
    fs::write(tmp.path().join("t.txt"), "a b c\nh\nd d e f g\n").unwrap();
    let out = ok(&["ppl", "--lm", "u.json", "--kind", "table", "--vocab", "vocab.txt", "--text", "t.txt"], tmp.path());
    assert_eq!(out.trim(), "10.0");
}

#[test]
fn wer_on_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("r.txt"), "u1\tthe cat\nu2\tsat down\n").unwrap();
    let out = ok(&["wer", "--ref", "r.txt", "--hyp", "r.txt"], tmp.path());
    assert!(out.starts_with("WER 0.00%"), "{out}");
    fs::write(tmp.path().join("h.txt"), "u1\tThe cat\nu2\tsat\n").unwrap();
    let out = ok(&["wer", "--ref", "r.txt", "--hyp", "h.txt"], tmp.path());
    assert!(out.contains("S=1 D=1 I=0 N=4"), "{out}");
    let out = ok(&["wer", "--ref", "r.txt", "--hyp", "h.txt", "--normalize", "lowercase"], tmp.path());
    assert!(out.starts_with("WER 25.00%"), "{out}");
}

#[test]
fn bench_has_equal_unpruned_and_k_equals_v_rows() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.3, 6);
    let out = ok(&[&["bench", "--topks", "none,all,8", "--beams", "4"], JOINT].concat(), tmp.path());
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 3, "{out}");
    assert_eq!(rows[0][1], "none");
    assert_eq!(rows[0][3], rows[1][3], "k = V changes WER");
    let peak = |r: &Vec<&str>| r[5].parse::<usize>().unwrap();
    assert!(peak(&rows[2]) < peak(&rows[0]));
}

#[test]
fn strategies_and_decoder_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 0.3, 6);
    let d = tmp.path();
    ok(&["init-weights", "--vocab", "c/vocab.txt", "--distill", "lm.txt", "--out", "bigram.fkwt"], d);
    ok(&["init-weights", "--vocab", "c/vocab.txt", "--seed", "3", "--out", "rand.fkwt"], d);
    ok(&[&["decode", "--set", "out=j", "--set", "decoder.weights=bigram.fkwt", "--set", "decoder.weight=0.3"], JOINT].concat(), d);
    for iface in ["aed", "merged", "prefix"] {
        let i = format!("decoder.interface={iface}");
        ok(&[&["decode", "--set", "out=r", "--set", "decoder.weights=rand.fkwt", "--set", &i, "--set", "nbest=2"], JOINT].concat(), d);
    }
    ok(&["decode", "--set", "corpus=c", "--set", "out=dl", "--set", "strategy=delayed", "--set", "lm.path=lm.txt"], d);
    let n = fs::read_to_string(d.join("r/nbest/utt00000.txt")).unwrap();
    assert!((1..=2).contains(&n.lines().count()), "{n}");
    assert!(n.contains("decoder="));
    ok(&["export-attn", "--weights", "rand.fkwt", "--vocab", "c/vocab.txt", "--text", "any those", "--pg", "c/pg/utt00000.fkpg", "--out", "attn.fkwt"], d);
    let f = asrfuse::attn::TensorFile::read(d.join("attn.fkwt")).unwrap();
    assert_eq!(f.len(), 4, "2 layers x 2 heads");
}
