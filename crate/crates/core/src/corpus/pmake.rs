//! Parallel make with a worker quota.
//!
//! The driver starts up to `jobs` compile tasks, then waits for one to
//! finish before starting the next. Each compile reads `/src/<task>.c`,
//! burns `work` rounds of hashing and writes `/obj/<task>.o`. The event
//! trace numbers driver steps, so it shows which task `wait` returned and
//! when the next one started.

use sha2::{Digest, Sha256};

use crate::kernel::iolog::DEV_TRACE;
use crate::kernel::{GuestExit, HostRegistry};
use crate::runtime::proc::{Pid, Proc};
use crate::runtime::DEFAULT_FS_SIZE;

/// Default tasks as `name:work`: a long task 1, a short task 2 and task 3.
pub const DEFAULT_TASKS: &str = "1:4000,2:50,3:1000";

fn compile(src: &[u8], work: u32) -> String {
    let mut h = Sha256::digest(src);
    for _ in 0..work {
        h = Sha256::digest(h);
    }
    hex::encode(&h[..8])
}

pub fn parse_tasks(spec: &str) -> Result<Vec<(String, u32)>, String> {
    spec.split(',')
        .map(|t| {
            let (name, work) = t.split_once(':').ok_or_else(|| format!("bad task `{t}`"))?;
            Ok((
                name.to_string(),
                work.parse().map_err(|_| format!("bad work in `{t}`"))?,
            ))
        })
        .collect()
}

/// Args: `jobs` (default 2), `tasks` (`name:work,...`).
pub fn register(reg: &mut HostRegistry) -> u32 {
    let cc = reg.register("pmake.cc", |ctx| async move {
        let Ok(mut p) = Proc::attach(ctx) else {
            return GuestExit::Exit(1);
        };
        let name = p.param("task").unwrap_or_default().to_string();
        let work = p.param("work").and_then(|w| w.parse().ok()).unwrap_or(0);
        let src = p.read_file(&format!("/src/{name}.c")).unwrap_or_default();
        let obj = compile(&src, work);
        let code = match p.write_file(&format!("/obj/{name}.o"), obj.as_bytes()) {
            Ok(()) => 0,
            Err(_) => 1,
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    });
    reg.register("pmake", move |ctx| async move {
        let Ok(mut p) = Proc::root(ctx, DEFAULT_FS_SIZE).await else {
            return GuestExit::Exit(1);
        };
        let code = match drive(&mut p, cc).await {
            Ok(code) => code,
            Err(e) => {
                p.console_write(format!("pmake: {e}\n").as_bytes());
                1
            }
        };
        p.exit(code).await.unwrap_or(GuestExit::Exit(1))
    })
}

async fn drive(p: &mut Proc, cc: u32) -> Result<u32, String> {
    let jobs: usize = p
        .param("jobs")
        .and_then(|v| v.parse().ok())
        .unwrap_or(2)
        .max(1);
    let tasks = parse_tasks(p.param("tasks").unwrap_or(DEFAULT_TASKS))?;
    for (name, _) in &tasks {
        let path = format!("/src/{name}.c");
        if !p.fs().exists(&path) {
            p.write_file(
                &path,
                format!("int task{name}(void) {{ return {name}; }}\n").as_bytes(),
            )
            .map_err(|e| e.to_string())?;
        }
    }
    let mut trace = String::new();
    let mut step = 0u32;
    let mut event = |trace: &mut String, what: &str, name: &str| {
        trace.push_str(&format!("{step} {what} {name}\n"));
        step += 1;
    };
    let mut running: Vec<(Pid, String)> = Vec::new();
    let mut failed = 0;
    for (name, work) in &tasks {
        if running.len() == jobs {
            let (pid, status) = p.wait().await.map_err(|e| e.to_string())?;
            let i = running
                .iter()
                .position(|(q, _)| *q == pid)
                .ok_or("wait returned a stranger")?;
            let (_, done) = running.remove(i);
            event(&mut trace, "done", &done);
            failed += (status != 0) as u32;
        }
        let args = [format!("task={name}"), format!("work={work}")];
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let pid = p.fork(cc, &argv).await.map_err(|e| e.to_string())?;
        event(&mut trace, "start", name);
        running.push((pid, name.clone()));
    }
    while let Ok((pid, status)) = p.wait().await {
        let i = running
            .iter()
            .position(|(q, _)| *q == pid)
            .ok_or("wait returned a stranger")?;
        let (_, done) = running.remove(i);
        event(&mut trace, "done", &done);
        failed += (status != 0) as u32;
    }
    p.ctx()
        .output(DEV_TRACE, trace.clone())
        .await
        .map_err(|e| e.to_string())?;
    let built = tasks
        .iter()
        .filter(|(n, _)| p.fs().exists(&format!("/obj/{n}.o")))
        .count();
    p.console_write(
        format!("pmake: built {built}/{} with {jobs} workers\n", tasks.len()).as_bytes(),
    );
    Ok(if failed == 0 && built == tasks.len() {
        0
    } else {
        1
    })
}
