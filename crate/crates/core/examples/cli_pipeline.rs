//! The command-line pipeline driven in-process: synthesize, mask, inpaint,
//! evaluate and plot, all inside a temporary directory.
//!
//! cargo run --release --example cli_pipeline -- [ITERATIONS]

use hyperei::cli::run;

fn step(args: &[&str]) -> i32 {
    println!("$ hyperei {}", args.join(" "));
    let argv = std::iter::once("hyperei").chain(args.iter().copied());
    let code = run(argv, &mut std::io::stdout(), &mut std::io::stderr());
    println!("(exit {code})\n");
    code
}

fn main() {
    let iterations = std::env::args().nth(1).unwrap_or_else(|| "300".into());
    let dir = std::env::temp_dir().join(format!("hyperei-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let (cube, mask, out) = (p("cube.hsc"), p("mask.hsm"), p("run"));

    step(&["synth", "--h", "32", "--w", "32", "--c", "8", "--rank", "3", "--seed", "7", "-o", &cube]);
    step(&["mask", "stripe", "--cols", "14:18", "--like", &cube, "-o", &mask]);
    step(&["nullspace", "--mask", &mask]);
    let code = step(&[
        "inpaint", "--cube", &cube, "--mask", &mask, "--reference", &cube, "--out-dir", &out,
        "--iterations", &iterations, "--log-every", "50",
    ]);
    if code == 0 {
        let x_hat = format!("{out}/x_hat.hsc");
        step(&["eval", "--x-hat", &x_hat, "--reference", &cube, "--mask", &mask]);
        step(&["plot", "--cube", &x_hat, "--rgb", "0,3,7", "-o", &p("x_hat.png")]);
    }
    step(&["eval", "--x-hat", &cube, "--reference", &p("missing.hsc")]);
    let _ = std::fs::remove_dir_all(&dir);
}
