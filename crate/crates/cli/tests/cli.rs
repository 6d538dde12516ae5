//! Behaviour of the `iucl` binary: exit codes, error reports and outputs.

use std::path::Path;
use std::process::{Command, Output};

use iucl_core::layout::{BBox, Category, Element, Layout, CANVAS_H, CANVAS_W};

fn iucl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iucl")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    let line = text.lines().last().expect("stderr has a report");
    serde_json::from_str(line).expect("stderr ends in JSON")
}

fn write_layout(dir: &Path, name: &str, elements: Vec<Element>) -> String {
    let path = dir.join(name);
    let layout = Layout::new(CANVAS_W, CANVAS_H, elements).unwrap();
    std::fs::write(&path, layout.to_json()).unwrap();
    path.to_str().unwrap().to_string()
}

fn el(c: Category, cx: f64, cy: f64, w: f64, h: f64) -> Element {
    Element::new(c, BBox::new(cx, cy, w, h).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2_with_json() {
    for args in [
        vec!["frobnicate"],
        vec!["synth", "--n", "3"],
        vec!["synth", "--n", "x", "--out", "d"],
        vec!["eval", "--ckpt", "a", "--data", "b", "--attr", "text", "--partial"],
        vec!["sample-noise", "--attr", "nonsense"],
    ] {
        let o = iucl(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(error_json(&o)["error"], "UsageError", "{args:?}");
    }
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_iucl"))
        .args(["sample-noise", "--attr", "text", "--n", "10"])
        .env("IUCL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = iucl(&["render", "--layout", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let report = error_json(&o);
    assert!(report["error"].is_string() && report["message"].is_string());

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"canvas\": 3").unwrap();
    let o = iucl(&["render", "--layout", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "ParseError");

    let o = iucl(&["sample-noise", "--attr", "text", "--n", "0"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(iucl(&["--help"]).status.code(), Some(0));
    assert_eq!(iucl(&["--version"]).status.code(), Some(0));
    assert_eq!(iucl(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn render_draws_one_colored_rect_per_element() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_layout(
        dir.path(),
        "l.json",
        vec![
            el(Category::Text, 0.5, 0.25, 0.5, 0.1),
            el(Category::Logo, 0.25, 0.75, 0.2, 0.2),
        ],
    );
    let o = iucl(&["render", "--layout", &path]);
    assert_eq!(o.status.code(), Some(0));
    let svg = stdout(&o);
    let doc = roxmltree::Document::parse(&svg).expect("well-formed XML");
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    assert_eq!(root.attribute("viewBox"), Some("0 0 240 350"));
    let rects: Vec<_> = root.children().filter(|n| n.has_tag_name("rect")).collect();
    assert_eq!(rects.len(), 2);
    assert_eq!(rects[0].attribute("fill"), Some("blue"));
    assert_eq!(rects[0].attribute("x"), Some("60"));
    assert_eq!(rects[0].attribute("y"), Some("70"));
    assert_eq!(rects[0].attribute("width"), Some("120"));
    assert_eq!(rects[0].attribute("height"), Some("35"));
    assert_eq!(rects[1].attribute("fill"), Some("red"));
    assert_eq!(rects[1].attribute("data-category"), Some("logo"));

    // rendering is a pure function of the layout
    let out = dir.path().join("a.svg");
    assert_eq!(iucl(&["render", "--layout", &path, "--out", out.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&out).unwrap(), svg);
}

#[test]
fn render_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_layout(dir.path(), "e.json", vec![]);
    let svg = stdout(&iucl(&["render", "--layout", &empty]));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().children().filter(|n| n.is_element()).count(), 0);

    let full = write_layout(dir.path(), "f.json", vec![el(Category::Underlay, 0.5, 0.5, 1.0, 1.0)]);
    let svg = stdout(&iucl(&["render", "--layout", &full]));
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let rect = doc.root_element().children().find(|n| n.has_tag_name("rect")).unwrap();
    assert_eq!(rect.attribute("x"), Some("0"));
    assert_eq!(rect.attribute("y"), Some("0"));
    assert_eq!(rect.attribute("width"), Some("240"));
    assert_eq!(rect.attribute("height"), Some("350"));
    assert_eq!(rect.attribute("fill"), Some("green"));
}

#[test]
fn loss_reports_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let gt = write_layout(dir.path(), "gt.json", vec![el(Category::Text, 0.5, 0.5, 0.4, 0.1)]);
    let mut logits = vec![[0.0, 0.0, 0.0, 0.0, 3.0]; 10];
    logits[0] = [3.0, 0.0, 0.0, 0.0, 0.0];
    let mut boxes = vec![[0.5, 0.5, 0.1, 0.1]; 10];
    boxes[0] = [0.5, 0.5, 0.4, 0.1];
    let pred = dir.path().join("pred.json");
    std::fs::write(&pred, serde_json::json!({ "logits": logits, "boxes": boxes }).to_string()).unwrap();
    let pl = dir.path().join("pl.json");
    std::fs::write(&pl, r#"{"elements": [{"index": 0, "category": "text", "cx": 0.5, "w": 0.4}]}"#).unwrap();

    let o = iucl(&[
        "loss", "--pred", pred.to_str().unwrap(), "--gt", &gt, "--pl", pl.to_str().unwrap(), "--seed", "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in ["l_rec", "l_ac", "l_ad", "l_plrm", "total"] {
        assert!(report[key].is_number(), "missing {key} in {report}");
    }
    // without the mask the partial term is the plain L1 over the 7 given slots:
    // only the category block deviates, by 2 (1 - softmax_0)
    let o = iucl(&["loss", "--pred", pred.to_str().unwrap(), "--gt", &gt, "--pl", pl.to_str().unwrap(), "--no-mask"]);
    let full: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let p0 = 3f64.exp() / (3f64.exp() + 4.0);
    let l_p = full["l_plrm"].as_f64().unwrap();
    assert!((l_p - 2.0 * (1.0 - p0)).abs() < 1e-12, "{l_p}");
    assert!(report["l_plrm"].as_f64().unwrap() <= l_p);

    // probabilities and logits together are ambiguous
    std::fs::write(
        &pred,
        serde_json::json!({ "logits": logits, "probs": logits, "boxes": boxes }).to_string(),
    )
    .unwrap();
    let o = iucl(&["loss", "--pred", pred.to_str().unwrap(), "--gt", &gt]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sample_noise_tracks_the_attribute_mean() {
    let o = iucl(&["sample-noise", "--attr", "underlay", "--n", "20000", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for c in 0..4 {
        let m = report["means"][c].as_f64().unwrap();
        let t = report["target"][c].as_f64().unwrap();
        assert!((m - t).abs() < 0.05, "channel {c}: {m} vs {t}");
    }
}

#[test]
fn gradcheck_command_passes() {
    let o = iucl(&["gradcheck", "--points", "5", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let results: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 7);
}

#[test]
fn synth_train_gen_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let d = data.to_str().unwrap();
    let m = model.to_str().unwrap();
    assert_eq!(iucl(&["synth", "--n", "6", "--seed", "1", "--out", d]).status.code(), Some(0));
    let o = iucl(&["train", "--data", d, "--epochs", "1", "--batch-size", "3", "--out", m]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(model.join("history.json").exists());
    let ckpt = model.join("model.ckpt");
    let sal = data.join("sample_000000").join("saliency.pgm");
    let pl = data.join("sample_000000").join("partial.json");
    let o = iucl(&[
        "gen", "--ckpt", ckpt.to_str().unwrap(), "--saliency", sal.to_str().unwrap(),
        "--attr", "logo", "--pl", pl.to_str().unwrap(), "--seed", "9",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let layout = Layout::from_json(&stdout(&o)).unwrap();
    assert!(layout.len() <= iucl_core::layout::Q_MAX);

    let report = dir.path().join("r.json");
    let o = iucl(&[
        "eval", "--ckpt", ckpt.to_str().unwrap(), "--data", d, "--partial", "coords",
        "--out", report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["r_plc"].is_number());
}
