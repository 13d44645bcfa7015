use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use detspace::guestvm::{assemble, disassemble};
use detspace::harness::{self, Executor, HarnessError, RunConfig, EXIT_GUEST, EXIT_OK, EXIT_USAGE};
use detspace::kernel::iolog::DEV_CONSOLE;
use detspace::kernel::InputLog;

#[derive(Parser)]
#[command(
    name = "detspace",
    version,
    about = "Deterministic space hierarchy runner"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a program and print its console output and report.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Write the raw system output here.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write an input log from arguments, files and stdin.
    Record {
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long = "arg", value_parser = parse_kv)]
        args: Vec<(String, String)>,
        /// `guest/path=host/path`
        #[arg(long = "file", value_parser = parse_kv)]
        files: Vec<(String, String)>,
        /// Record stdin as console input.
        #[arg(long)]
        stdin: bool,
    },
    /// Run a program against a recorded input log.
    Replay {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        log: PathBuf,
    },
    /// Run repeatedly across executors and compare every output byte.
    Selfcheck {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Also vary the node count, e.g. `1,4`.
        #[arg(long = "across-nodes", value_delimiter = ',')]
        across_nodes: Vec<usize>,
    },
    /// Time a benchmark and print its result hash.
    Bench {
        name: String,
        #[arg(long)]
        size: u64,
        #[arg(long, default_value_t = 4)]
        threads: u32,
        #[arg(long, default_value_t = 1)]
        nodes: usize,
        #[arg(long = "arg", value_parser = parse_kv)]
        args: Vec<(String, String)>,
    },
    /// Assemble VM source into raw code.
    Asm {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Disassemble raw VM code.
    Disasm { input: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecutorArg {
    Serial,
    Parallel,
}

#[derive(Args)]
struct RunArgs {
    /// Corpus program name or path to VM code.
    program: Option<String>,
    /// Load the whole run configuration from a JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "arg", value_parser = parse_kv)]
    args: Vec<(String, String)>,
    #[arg(long)]
    input_log: Option<PathBuf>,
    #[arg(long, value_enum)]
    executor: Option<ExecutorArg>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    quantum: Option<u64>,
    #[arg(long)]
    fs_size: Option<u32>,
    /// Print the synchronization trace in the report.
    #[arg(long)]
    trace: bool,
    /// Print cluster messages in the report.
    #[arg(long)]
    trace_messages: bool,
    /// Print host debug lines immediately on stderr.
    #[arg(long)]
    debug_console: bool,
    #[arg(long, hide = true)]
    test_backdoor: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json(
                &std::fs::read_to_string(p).map_err(|e| HarnessError::Io(p.clone(), e))?,
            )?,
            None => RunConfig::default(),
        };
        match (&self.program, &self.config) {
            (Some(p), _) => c.program = p.clone(),
            (None, None) => return Err(HarnessError::Config("no program given".into())),
            (None, Some(_)) => {}
        }
        c.args.extend(self.args.iter().cloned());
        if self.input_log.is_some() {
            c.input_log = self.input_log.clone();
        }
        match self.executor {
            Some(ExecutorArg::Serial) => c.executor = Executor::Serial,
            Some(ExecutorArg::Parallel) => c.executor = Executor::Parallel { seed: self.seed },
            None => {}
        }
        c.workers = self.workers.unwrap_or(c.workers);
        c.nodes = self.nodes.unwrap_or(c.nodes);
        c.quantum = self.quantum.or(c.quantum);
        c.fs_size = self.fs_size.or(c.fs_size);
        c.trace_sync |= self.trace;
        c.trace_messages |= self.trace_messages;
        c.debug_console |= self.debug_console;
        c.test_backdoor |= self.test_backdoor;
        Ok(c)
    }
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.to_string(), v.to_string()))
}

fn io_err(p: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Io(p.to_path_buf(), e)
}

fn run_cmd(
    config: RunConfig,
    output: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<i32, HarnessError> {
    let r = harness::run(&config)?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(&r.streams.console);
    if let Some(p) = &output {
        std::fs::write(p, &r.streams.output).map_err(io_err(p))?;
    }
    match &report {
        Some(p) => std::fs::write(p, r.render()).map_err(io_err(p))?,
        None => {
            let _ = stdout.write_all(r.render().as_bytes());
        }
    }
    Ok(r.exit_code())
}

fn main_inner(cli: Cli) -> Result<i32, HarnessError> {
    match cli.cmd {
        Cmd::Run {
            run,
            output,
            report,
        } => run_cmd(run.config()?, output, report),
        Cmd::Replay { run, log } => {
            let mut c = run.config()?;
            c.input_log = Some(log);
            run_cmd(c, None, None)
        }
        Cmd::Record {
            out,
            args,
            files,
            stdin,
        } => {
            let mut log = InputLog::new();
            for (k, v) in &args {
                log.arg(k, v);
            }
            for (guest, host) in &files {
                let host = PathBuf::from(host);
                let body = std::fs::read(&host).map_err(io_err(&host))?;
                log.file(guest, &body);
            }
            if stdin {
                let mut buf = Vec::new();
                std::io::stdin()
                    .read_to_end(&mut buf)
                    .map_err(io_err("<stdin>".as_ref()))?;
                log.push(DEV_CONSOLE, buf);
            }
            std::fs::write(&out, log.to_bytes()).map_err(io_err(&out))?;
            println!(
                "recorded {} records to {}",
                log.records.len(),
                out.display()
            );
            Ok(EXIT_OK)
        }
        Cmd::Selfcheck {
            run,
            runs,
            across_nodes,
        } => {
            let check = harness::selfcheck(&run.config()?, runs, &across_nodes)?;
            print!("{}", check.render());
            Ok(check.exit_code())
        }
        Cmd::Bench {
            name,
            size,
            threads,
            nodes,
            args,
        } => {
            let b = harness::bench(&name, size, threads, nodes, &args)?;
            print!("{}", b.render());
            Ok(if b.terminal == "exit 0" {
                EXIT_OK
            } else {
                EXIT_GUEST
            })
        }
        Cmd::Asm { input, out } => {
            let src = std::fs::read_to_string(&input).map_err(io_err(&input))?;
            let code = assemble(&src).map_err(|e| HarnessError::Asm(input.clone(), e))?;
            std::fs::write(&out, code).map_err(io_err(&out))?;
            Ok(EXIT_OK)
        }
        Cmd::Disasm { input } => {
            let code = std::fs::read(&input).map_err(io_err(&input))?;
            print!("{}", disassemble(&code));
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_USAGE as u8
            } else {
                EXIT_OK as u8
            });
        }
    };
    match main_inner(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("detspace: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
