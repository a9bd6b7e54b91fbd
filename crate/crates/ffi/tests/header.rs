//! Checks the generated C header against the exported symbols and drives
//! the static library from a small C program.

use std::path::{Path, PathBuf};
use std::process::Command;

use minbridge::bridge::LambdaRule;
use minbridge::harness::{estimate_method, DgpSpec, EstimatorKind, EstimatorOptions};

fn manifest_dir() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

fn header_path() -> PathBuf {
    manifest_dir().join("include/minbridge.h")
}

fn exported_functions() -> Vec<String> {
    let src = std::fs::read_to_string(manifest_dir().join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| {
            let rest = l
                .strip_prefix("pub unsafe extern \"C\" fn ")
                .or_else(|| l.strip_prefix("pub extern \"C\" fn "))?;
            Some(rest.split('(').next().unwrap().to_owned())
        })
        .collect()
}

/// Directory holding the library artifacts (`target/<profile>`).
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn header_declares_every_exported_function() {
    let header = std::fs::read_to_string(header_path()).unwrap();
    let names = exported_functions();
    assert!(names.len() >= 13, "found {names:?}");
    for name in names {
        let declared =
            header.contains(&format!(" {name}(")) || header.contains(&format!("*{name}("));
        assert!(declared, "{name} missing from header");
    }
    for ty in [
        "MbStatus",
        "MbMethod",
        "MbOptions",
        "MbSummary",
        "typedef struct MbPanel MbPanel",
    ] {
        assert!(header.contains(ty), "{ty} missing from header");
    }
}

#[test]
fn header_compiles_as_c_and_cxx() {
    for lang in ["c", "c++"] {
        let out = Command::new("cc")
            .args(["-x", lang, "-fsyntax-only", "-Wall", "-Wextra", "-Werror"])
            .arg(header_path())
            .output()
            .expect("a C compiler is available as cc");
        assert!(
            out.status.success(),
            "{lang}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

const SMOKE: &str = r#"
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include "minbridge.h"

static char *read_file(const char *path) {
    FILE *f = fopen(path, "rb");
    if (!f) return NULL;
    fseek(f, 0, SEEK_END);
    long n = ftell(f);
    fseek(f, 0, SEEK_SET);
    char *buf = malloc((size_t)n + 1);
    size_t got = fread(buf, 1, (size_t)n, f);
    buf[got] = '\0';
    fclose(f);
    return buf;
}

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    char *config = read_file(argv[1]);
    if (!config) return 2;
    MbPanel *panel = NULL;
    if (mb_panel_simulate(config, 42, &panel) != MbStatus_Ok) {
        fprintf(stderr, "simulate: %s\n", mb_last_error_message());
        return 1;
    }
    size_t n = 0, pre = 0, post = 0, treated = 0;
    mb_panel_dims(panel, &n, &pre, &post, &treated);

    MbOptions opts = mb_options_default();
    MbEstimate *est = NULL;
    if (mb_estimate(panel, MbMethod_BridgeTwoStage, &opts, &est) != MbStatus_Ok) {
        fprintf(stderr, "estimate: %s\n", mb_last_error_message());
        return 1;
    }
    MbSummary s;
    mb_estimate_summary(est, &s);

    double theta[16];
    size_t len = 0;
    MbStatus st = mb_estimate_theta(est, theta, 16, &len);
    char json[4096];
    size_t jlen = 0;
    MbStatus js = mb_estimate_json(est, json, sizeof json, &jlen);

    MbEstimate *bad = NULL;
    MbStatus bs = mb_estimate(panel, 99, NULL, &bad);

    printf("version=%s\n", mb_version());
    printf("dims=%zu,%zu,%zu,%zu\n", n, pre, post, treated);
    printf("estimate=%.17g\n", s.estimate);
    printf("ci=%d\n", s.ci_lower <= s.estimate && s.estimate <= s.ci_upper);
    printf("theta=%d,%zu,%zu\n", st, len, s.theta_len);
    printf("json=%d,%d\n", js, strlen(json) == jlen && strstr(json, "\"method\":\"bridge_two_stage\"") != NULL);
    printf("bad=%d,%d,%s\n", bs, bad == NULL, mb_last_error_message());

    mb_estimate_free(est);
    mb_panel_free(panel);
    free(config);
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_static_library() {
    let lib = artifact_dir().join("libminbridge_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, SMOKE).unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(manifest_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let config = manifest_dir().join("../../configs/twfe.toml");
    let run = Command::new(&exe).arg(&config).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(
        run.status.success(),
        "{stdout}\n{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let field = |key: &str| -> String {
        stdout
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("{key} missing in {stdout}"))
            .to_owned()
    };
    assert_eq!(field("version"), env!("CARGO_PKG_VERSION"));
    assert_eq!(field("ci"), "1");
    assert_eq!(field("json"), "0,1");
    assert_eq!(field("bad"), "2,1,unknown method 99");

    let spec: DgpSpec = toml::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    let (data, _) = spec.simulate(42).unwrap();
    let opts = EstimatorOptions {
        lambda: LambdaRule { c: 1.0, beta: 0.75 },
        rho: 0.05,
        ridge: 0.0,
        factor_rank: Some(1),
        holdout_pre: 0,
    };
    let expected = estimate_method(EstimatorKind::BridgeTwoStage, &data, &opts).unwrap();
    let estimate: f64 = field("estimate").parse().unwrap();
    assert_eq!(estimate, expected.outcome.estimate);
    let dims: Vec<usize> = field("dims")
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(
        dims,
        [
            data.n_units(),
            data.n_pre(),
            data.n_post(),
            data.n_treated()
        ]
    );
    let theta_len = expected.theta.unwrap().len();
    assert_eq!(field("theta"), format!("0,{theta_len},{theta_len}"));
}
