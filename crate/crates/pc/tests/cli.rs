use std::path::Path;
use std::process::{Command, Output};

fn pc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pc"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PC_BACKEND")
        .env_remove("PC_WEIGHTS")
        .env_remove("PC_STORE_DIR")
        .output()
        .expect("run pc")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = pc(args, cwd);
    assert!(
        out.status.success(),
        "pc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn command_line_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["toy-faces", "--n", "2", "--seed", "3", "--out-dir", "faces"], d);
    assert!(d.join("faces/face_000.png").exists() && d.join("faces/face_001.png").exists());

    ok(&["embed", "--image", "faces/face_000.png", "--subject-id", "ada", "--out", "subjects/ada.pcs"], d);
    let tune = ok(
        &[
            "tune", "--image", "faces/face_001.png", "--subject-id", "bo", "--out", "subjects/bo.pcs",
            "--iterations", "3",
        ],
        d,
    );
    assert!(tune.contains("fit loss"));
    assert!(d.join("subjects/bo.pcs/manifest.json").exists());

    let gen = |out: &str| ok(&["generate", "--profile", "subjects/bo.pcs", "--seed", "4", "--prompt", "{S1} on a boat", "--out", out], d);
    gen("g1.png");
    gen("g2.png");
    assert_eq!(read(d.join("g1.png")), read(d.join("g2.png")));

    ok(
        &[
            "edit", "--profile", "subjects/ada.pcs", "--direction", "smile", "--beta", "-1:1:3", "--out-dir", "edits",
        ],
        d,
    );
    let mut frames: Vec<String> = std::fs::read_dir(d.join("edits"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    frames.sort();
    assert_eq!(frames.len(), 4, "{frames:?}");
    assert!(frames.contains(&"base.png".to_owned()));

    ok(&["interp", "--a", "subjects/ada.pcs", "--b", "subjects/bo.pcs", "--n", "3", "--out-dir", "interp"], d);
    assert_eq!(std::fs::read_dir(d.join("interp")).unwrap().count(), 3);

    ok(
        &[
            "compose", "--profiles", "subjects/ada.pcs", "subjects/bo.pcs", "--masks-out", "masks.msk", "--out", "c1.png",
        ],
        d,
    );
    for name in ["subject_0", "subject_1", "background"] {
        assert!(d.join(format!("masks.{name}.png")).exists());
    }
    // Reusing the saved masks on one thread gives the same picture.
    ok(
        &[
            "compose", "--profiles", "subjects/ada.pcs", "subjects/bo.pcs", "--masks", "masks.msk", "--sequential",
            "--out", "c2.png",
        ],
        d,
    );
    assert_eq!(read(d.join("c1.png")), read(d.join("c2.png")));
    ok(
        &["compose", "--subjects", "subjects/ada.pcs,subjects/bo.pcs", "--masks", "masks.msk", "--out", "c3.png"],
        d,
    );
    assert_eq!(read(d.join("c1.png")), read(d.join("c3.png")));

    std::fs::write(d.join("prompts.txt"), "A photo of {S1}\n{S1} reading\n").unwrap();
    let agg = ok(&["eval", "--subjects", "subjects", "--prompts", "prompts.txt", "--out", "report.json"], d);
    let agg: serde_json::Value = serde_json::from_str(&agg).unwrap();
    assert_eq!(agg["rows"], 4);
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("report.json"))).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(String::from_utf8(read(d.join("report.csv"))).unwrap().lines().count(), 5);

    let listed = ok(&["directions"], d);
    assert_eq!(listed.lines().count(), 4);
    let pairs = serde_json::json!([{ "after": vec![1.0; 24], "before": vec![0.0; 24] }]);
    std::fs::write(d.join("pairs.json"), pairs.to_string()).unwrap();
    let added = ok(&["directions", "--catalog", "mine.pcd", "--extract", "pairs.json", "--name", "tan"], d);
    assert!(added.starts_with("tan\t"));
    ok(
        &[
            "edit", "--profile", "subjects/ada.pcs", "--catalog", "mine.pcd", "--edit", "tan=0.5", "--out-dir", "tan",
        ],
        d,
    );

    ok(&["pretrain", "--toy", "4", "--iters", "3", "--batch", "2", "--out", "weights.pcw"], d);
    ok(&["--weights", "weights.pcw", "embed", "--image", "faces/face_000.png", "--subject-id", "cy", "--out", "cy.pcs"], d);
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        &["edit", "--profile", "x.pcs", "--direction", "smile", "--beta", "-1:1:1", "--out-dir", "e"][..],
        &["edit", "--profile", "x.pcs", "--edit", "smile", "--out-dir", "e"],
        &["generate", "--profile", "missing.pcs", "--out", "g.png"],
        &["pretrain", "--out", "w.pcw"],
    ] {
        let out = pc(args, d);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
    let out = pc(&["edit", "--profile", "x.pcs", "--direction", "smile", "--beta", "-1:1:1", "--out-dir", "e"], d);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n must be"));
    let out = pc(&["--backend", "nope.toml", "toy-faces", "--out-dir", "f"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}
