use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const HEAT: &str = r#"[problem]
name = "heat"

[run]
command = "value"
t = 0.0
x = [0.0, 0.0]
seed = 42

[mc]
n_paths = 10000
"#;

fn sfpe(dir: &Path, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_sfpe"))
        .arg("--config")
        .arg(&path)
        .args(extra)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn read(dir: &Path, out: &str, file: &str) -> String {
    std::fs::read_to_string(dir.join(out).join(file)).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn heat_value_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = sfpe(dir.path(), HEAT, &["--output", "a"]);
    let b = sfpe(dir.path(), HEAT, &["--output", "b"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(b.status.success());
    let csv = read(dir.path(), "a", "results.csv");
    assert_eq!(csv, read(dir.path(), "b", "results.csv"));
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# sfpe version="));
    assert_eq!(lines.next().unwrap(), "t,x,component,mean,stderr,n_samples");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[1], "0;0");
    let mean: f64 = row[3].parse().unwrap();
    let se: f64 = row[4].parse().unwrap();
    // X_1 ~ N(0, 2 I), so v(0, 0) = E exp(-|X_1|^2 / 2) = 3^(-d/2).
    assert!((mean - 1.0 / 3.0).abs() < 4.0 * se, "{mean} {se}");
    assert!(read(dir.path(), "a", "timings.csv").starts_with("stage,seconds"));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = TempDir::new().unwrap();
    let config = HEAT.replace("\"value\"", "\"gradient\"");
    let one = sfpe(dir.path(), &config, &["--threads", "1", "--output", "one"]);
    let four = sfpe(dir.path(), &config, &["--threads", "4", "--output", "four"]);
    assert!(one.status.success() && four.status.success(), "{}", stderr(&one));
    assert_eq!(
        read(dir.path(), "one", "results.csv"),
        read(dir.path(), "four", "results.csv")
    );
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let config = HEAT.replace("seed = 42\n", "");
    let missing = sfpe(dir.path(), &config, &[]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("seed"));
    let a = sfpe(dir.path(), &config, &["--seed", "42", "--output", "a"]);
    let b = sfpe(dir.path(), HEAT, &["--output", "b"]);
    assert!(a.status.success() && b.status.success());
    let body = |s: String| s.lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(
        body(read(dir.path(), "a", "results.csv")),
        body(read(dir.path(), "b", "results.csv"))
    );
}

#[test]
fn verify_manufactured_passes() {
    let dir = TempDir::new().unwrap();
    let config = r#"[problem]
name = "manufactured-d2"

[run]
command = "verify"
t = 0.1
x = [0.3, -0.2]
seed = 7

[mc]
n_paths = 4000
grid_steps = 16
antithetic = true
quadrature = "randomized-uniform"
"#;
    let out = sfpe(dir.path(), config, &["--output", "v"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}{}", stderr(&out));
    assert!(stdout.contains("all checks passed"), "{stdout}");
    let results = read(dir.path(), "v", "results.csv");
    assert!(results.contains("pde_residual") && results.contains("fixed_point"));
    for file in [
        "conditions.csv",
        "crosscheck.csv",
        "weight_moments.csv",
        "certificates.csv",
    ] {
        assert!(!read(dir.path(), "v", file).contains(",false"), "{file}");
    }
}

#[test]
fn budget_refusal_reports_cost() {
    let dir = TempDir::new().unwrap();
    let config = HEAT
        .replace("\"value\"", "\"solve\"")
        .replace("name = \"heat\"", "name = \"manufactured-d2\"")
        + "\n[picard]\ndepth = 3\nsamples_per_level = [10, 10, 10]\n";
    let out = sfpe(dir.path(), &config, &["--budget", "1000"]);
    assert_eq!(out.status.code(), Some(4));
    let err = stderr(&out);
    assert!(err.contains("predicted cost") && err.contains("1000"), "{err}");
    assert!(!dir.path().join("sfpe-output").exists());
}

#[test]
fn small_solve_runs() {
    let dir = TempDir::new().unwrap();
    let config = HEAT
        .replace("\"value\"", "\"solve\"")
        .replace("name = \"heat\"", "name = \"manufactured-d2\"")
        + "\n[picard]\ndepth = 2\nsamples_per_level = [2, 50]\nscheme = \"multilevel\"\n";
    let config = config.replace("n_paths = 10000", "n_paths = 10\ngrid_steps = 8");
    let out = sfpe(dir.path(), &config, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = read(dir.path(), "sfpe-output", "results.csv");
    assert_eq!(csv.lines().count(), 2 + 3);
}

#[test]
fn config_errors_exit_2_with_key_and_line() {
    let dir = TempDir::new().unwrap();
    let out = sfpe(dir.path(), &HEAT.replace("t = 0.0", "t = 1.1"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("`t`") && err.contains("line 6"), "{err}");

    let out = sfpe(dir.path(), &HEAT.replace("seed = 42", "seed = 42\nsamples = 3"), &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("samples") && err.contains("line 9"), "{err}");

    let out = sfpe(dir.path(), &HEAT.replace("x = [0.0, 0.0]\n", ""), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing field `x`"), "{}", stderr(&out));
}

#[test]
fn problem_file_relative_to_config() {
    let dir = TempDir::new().unwrap();
    let problem = r#"dim = 1
horizon = 1.0
[drift]
kind = "zero"
[diffusion]
kind = "scalar"
scale = 1.0
[terminal]
kind = "linear"
coefficients = [2.0]
[nonlinearity]
kind = "zero"
[constants]
c = 0.0
growth_c = 1.0
alpha = 1.0
lipschitz = 0.1
growth_p = 1.0
"#;
    std::fs::create_dir(dir.path().join("problems")).unwrap();
    std::fs::write(dir.path().join("problems/linear.toml"), problem).unwrap();
    let config = HEAT
        .replace("\"heat\"", "\"problems/linear.toml\"")
        .replace("\"value\"", "\"gradient\"")
        .replace("x = [0.0, 0.0]", "x = [0.5]");
    let out = sfpe(dir.path(), &config, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = read(dir.path(), "sfpe-output", "results.csv");
    let grad: f64 = csv.lines().nth(3).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((grad - 2.0).abs() < 0.1, "{grad}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let text = std::fs::read_to_string(&path).unwrap();
            sfpe_cli::config::parse_config(&text, &dir).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
