use detspace::corpus::{self, matmult, md5, misc, qsort, CorpusError, Workload};
use detspace::kernel::iolog::{DEV_FS, DEV_TRACE};
use detspace::kernel::{ExecutorKind, Kernel, KernelConfig, RunOutcome, Terminal};
use detspace::runtime::fs::FsImage;

fn args(kv: &[(&str, &str)]) -> Vec<(String, String)> {
    kv.iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn run_cfg(name: &str, kv: &[(&str, &str)], cfg: KernelConfig) -> RunOutcome {
    let Workload {
        registry,
        program,
        input,
    } = corpus::build(name, &args(kv), false).unwrap();
    let out = Kernel::new(cfg, registry).run(&program, &input).unwrap();
    assert_eq!(
        out.terminal,
        Terminal::Exit(0),
        "{name}: {}",
        out.output.console_text()
    );
    out
}

fn run(name: &str, kv: &[(&str, &str)]) -> RunOutcome {
    run_cfg(name, kv, KernelConfig::default())
}

fn fs(out: &RunOutcome) -> FsImage {
    FsImage::from_bytes(&out.output.device(DEV_FS)).unwrap()
}

fn words(b: &[u8]) -> Vec<u32> {
    b.chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn hello() {
    assert_eq!(run("hello", &[]).output.console_text(), "hello, world\n");
}

#[test]
fn unknown_and_test_only_names() {
    assert!(matches!(
        corpus::build("nope", &[], false),
        Err(CorpusError::Unknown(_))
    ));
    assert!(matches!(
        corpus::build(corpus::NONDET, &[], false),
        Err(CorpusError::TestOnly(_))
    ));
    assert!(corpus::build(corpus::NONDET, &[], true).is_ok());
}

#[test]
fn md5_finds_the_preimage_for_any_thread_count() {
    let target = md5::md5_hex(b"dc");
    for threads in ["1", "3", "8"] {
        let out = run(
            "md5",
            &[("hash", &target), ("len", "3"), ("threads", threads)],
        );
        let text = out.output.console_text();
        let found = text.trim().rsplit(' ').next().unwrap();
        assert_eq!(md5::md5_hex(found.as_bytes()), target, "{text}");
        assert_eq!(found, "dc");
    }
}

#[test]
fn md5_tree_same_answer_on_any_cluster() {
    let mut texts = Vec::new();
    for nodes in [1, 2, 4] {
        let cfg = KernelConfig {
            nodes,
            ..KernelConfig::default()
        };
        let out = run_cfg(
            "md5tree",
            &[("word", "fox"), ("len", "3"), ("fanout", "4")],
            cfg,
        );
        texts.push(out.output.clone());
    }
    assert!(texts.iter().all(|t| *t == texts[0]));
    assert!(String::from_utf8_lossy(&texts[0].console()).ends_with("found fox\n"));
}

#[test]
fn matmult_matches_triple_loop() {
    let n = 24u32;
    let out = run("matmult", &[("n", "24"), ("seed", "5"), ("threads", "5")]);
    let (a, b) = matmult::inputs(n, 5);
    let n = n as usize;
    let mut want = vec![0u32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0u32;
            for k in 0..n {
                acc = acc.wrapping_add(a[i * n + k].wrapping_mul(b[k * n + j]));
            }
            want[i * n + j] = acc;
        }
    }
    assert_eq!(words(fs(&out).read(matmult::OUTPUT).unwrap()), want);
}

#[test]
fn qsort_matches_host_sort() {
    for input in ["random", "sorted", "reverse", "constant"] {
        let out = run(
            "qsort",
            &[
                ("n", "2000"),
                ("input", input),
                ("seed", "3"),
                ("depth", "2"),
            ],
        );
        let mut want = qsort::input(qsort::Input::parse(input).unwrap(), 2000, 3);
        want.sort();
        assert_eq!(
            words(fs(&out).read(qsort::OUTPUT).unwrap()),
            want,
            "{input}"
        );
    }
}

#[test]
fn pmake_waits_for_the_earliest_fork() {
    let out = run("pmake", &[]);
    let trace = String::from_utf8(out.output.device(DEV_TRACE)).unwrap();
    assert_eq!(
        trace,
        "0 start 1\n1 start 2\n2 done 1\n3 start 3\n4 done 2\n5 done 3\n"
    );
    let fs = fs(&out);
    for t in ["1", "2", "3"] {
        assert!(fs.exists(&format!("/obj/{t}.o")));
    }
}

#[test]
fn swap_swaps() {
    assert_eq!(
        run("swap", &[("x", "5"), ("y", "9")]).output.console_text(),
        "x=9 y=5\n"
    );
}

#[test]
fn writers_emit_every_token_once() {
    let out = run("writers", &[("procs", "7"), ("seed", "11")]);
    let text = out.output.console_text();
    let mut want = Vec::new();
    for plan in misc::writer_plans(11, 7) {
        for p in std::iter::once(&plan).chain(plan.child.as_deref()) {
            want.extend((0..p.chunks).map(|i| misc::token(&p.name, i)));
        }
    }
    let mut got: Vec<String> = text.split_inclusive(';').map(str::to_string).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn dsched_programs_finish() {
    let cases = [
        ("prodcons", "6", "200"),
        ("contention", "6", "200"),
        ("join_any", "6", "200"),
        ("signal_order", "40", "60"),
    ];
    for (name, items, quantum) in cases {
        let cfg = KernelConfig {
            executor: ExecutorKind::Parallel {
                workers: 2,
                seed: 4,
            },
            ..KernelConfig::default()
        };
        let out = run_cfg(name, &[("items", items), ("quantum", quantum)], cfg);
        assert!(!out.output.device(DEV_TRACE).is_empty(), "{name}");
    }
}
