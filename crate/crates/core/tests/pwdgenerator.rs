use std::path::PathBuf;

use framevault::exec::{run, run_native, RunOptions, Violation};
use framevault::instrument::{emit, parse_instrumented};
use framevault::memory::Address;
use framevault::program::{
    parse_lists, parse_program, MemTarget, Probe, SizeExpr, Stmt, Target, Value, VaultCall,
};
use framevault::scenario::identity_from_map;
use framevault::{instrument, ExceptionKind, InstrumentedProgram, Program, Syscall, VaultState};

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/pwdgenerator")
}

fn read(name: &str) -> String {
    std::fs::read_to_string(dir().join(name)).unwrap()
}

fn program() -> Program {
    parse_program(&read("program.json")).unwrap()
}

fn instrumented(p: &Program) -> InstrumentedProgram {
    let lists = parse_lists(&read("UntrustedList"), &read("SensitiveList")).unwrap();
    instrument(p, &lists).unwrap()
}

fn lib_func_body(p: &mut Program) -> &mut Vec<Stmt> {
    &mut p
        .functions
        .iter_mut()
        .find(|f| f.name == "lib_func")
        .unwrap()
        .body
}

#[test]
fn instrumentation_matches_hand_written_sequence() {
    let out = instrumented(&program());
    let pwd = out.function("pwdgenerator").unwrap();
    let seq = pwd.call_sequence(&|n| out.is_untrusted(n));
    assert_eq!(
        seq,
        [
            "register_stack(all=True)",
            "register_memory(id, len, False)",
            "register_memory_exception(&age, 4, False)",
            "start_protect()",
            "lib_func(&age)",
            "stop_protect()",
            "unregister_stack()",
        ]
    );
    // register_stack opens the body; register_memory(id) follows id = malloc(len)
    assert!(matches!(
        pwd.body[0],
        Stmt::Vault {
            call: VaultCall::RegisterStack { all: true },
            ..
        }
    ));
    let alloc = pwd
        .body
        .iter()
        .position(|s| matches!(s, Stmt::HeapAlloc { .. }))
        .unwrap();
    assert!(matches!(
        &pwd.body[alloc + 1],
        Stmt::Vault { call: VaultCall::RegisterMemory { target: MemTarget::Pointee(v), len: SizeExpr::Const(c), read_only: false }, .. }
            if v == "id" && c == "len"
    ));
    assert!(matches!(pwd.body.last(), Some(Stmt::Return)));
    // main and lib_func untouched
    assert_eq!(
        out.function("main").unwrap().body,
        program().functions[0].body
    );
    assert_eq!(parse_instrumented(&emit(&out)).unwrap(), out);
}

#[test]
fn protected_run_hides_passwd() {
    let out = instrumented(&program());
    let identity = identity_from_map(&read("image.map"), &out).unwrap();
    let o = run(
        &out,
        identity.clone(),
        VaultState::new(identity),
        "main",
        &RunOptions::default(),
    );
    let r = &o.report;
    assert!(r.violations.is_empty(), "{}", r.to_text());
    assert!(r.faults.is_empty(), "{:?}", r.faults);
    assert_eq!(r.secret_bytes_observed, 0);
    let read = &r.observations[0];
    assert_eq!(read.len, 256);
    assert_eq!(read.bytes, "00".repeat(256));
    for call in Syscall::ALL {
        assert_eq!(r.stats.count(call), 1, "{call}");
    }
    assert_eq!(r.stats.total(), 6);

    // pwdgenerator's frame sat right below main's 16-byte frame
    let base = Address(framevault::memory::STACK_BASE - 16);
    let age = base.sub(284);
    let passwd = base.sub(272);
    assert_eq!(read.addr, passwd);
    // the frame was scrubbed by unregister_stack after returning; check the
    // heap object instead, restored by stop_protect
    assert_eq!(
        o.memory.peek(Address(framevault::memory::HEAP_BASE), 64),
        vec![73; 64]
    );
    assert_eq!(o.memory.peek(age, 4), vec![0; 4]);
    assert!(o.kernel.save_buffer().fully_drained());
}

#[test]
fn age_write_survives_stop_protect() {
    // unregister_stack scrubs the frame on return, so a second untrusted call
    // reads age back while the frame is still live
    let mut p = program();
    let pwd = p
        .functions
        .iter_mut()
        .find(|f| f.name == "pwdgenerator")
        .unwrap();
    pwd.body.insert(
        5,
        Stmt::call(
            "peek_age",
            vec![framevault::program::Arg::AddrOf("age".into())],
        ),
    );
    let mut peek = framevault::program::FunctionDesc::new("peek_age");
    peek.external = true;
    peek.params.push(framevault::program::VarDesc::pointer("p"));
    peek.body = vec![Stmt::probe(Probe::Read {
        target: Target::Arg {
            index: 0,
            offset: 0,
        },
        len: 4,
    })];
    p.functions.push(peek);
    let lists = parse_lists("lib_func(1)\npeek_age(1)\n", "").unwrap();
    let out = instrument(&p, &lists).unwrap();
    let identity = framevault::exec::synthesize_identity(&out);
    let o = run(
        &out,
        identity.clone(),
        VaultState::new(identity),
        "main",
        &RunOptions::default(),
    );
    assert!(o.report.violations.is_empty(), "{}", o.report.to_text());
    let last = o.report.observations.last().unwrap();
    assert_eq!(last.function, "peek_age");
    assert_eq!(last.bytes, "1f000000");
}

#[test]
fn native_run_observes_the_secret() {
    let out = instrumented(&program());
    let identity = identity_from_map(&read("image.map"), &out).unwrap();
    let o = run_native(&out, identity, "main", &RunOptions::default());
    let r = &o.report;
    assert_eq!(r.secret_bytes_observed, 256);
    assert_eq!(r.observations[0].bytes, "53".repeat(256));
    assert_eq!(r.stats.total(), 0);
    assert_eq!(r.leaks().count(), 1);
}

#[test]
fn spoofed_register_memory_is_rejected() {
    let mut p = program();
    lib_func_body(&mut p).insert(
        0,
        Stmt::probe(Probe::Forge {
            call: VaultCall::RegisterMemory {
                target: MemTarget::At(Target::Arg {
                    index: 0,
                    offset: 12,
                }),
                len: SizeExpr::Bytes(256),
                read_only: false,
            },
        }),
    );
    let baseline = {
        let out = instrumented(&program());
        let id = framevault::exec::synthesize_identity(&out);
        run(
            &out,
            id.clone(),
            VaultState::new(id),
            "main",
            &RunOptions::default(),
        )
    };
    let out = instrumented(&p);
    let identity = framevault::exec::synthesize_identity(&out);
    let o = run(
        &out,
        identity.clone(),
        VaultState::new(identity),
        "main",
        &RunOptions::default(),
    );
    let r = &o.report;
    let exceptions: Vec<_> = r.exceptions().collect();
    assert_eq!(exceptions.len(), 1);
    assert_eq!(exceptions[0].kind, ExceptionKind::IdentityMismatch);
    assert_eq!(exceptions[0].syscall, Syscall::RegisterMemory);
    assert_eq!((r.forged_calls, r.forged_rejected), (1, 1));
    assert_eq!(r.leaks().count(), 0);
    assert_eq!(r.integrity_breaches().count(), 0);
    assert_eq!(r.memory_digest, baseline.report.memory_digest);
}

#[test]
fn strict_mode_halts_at_first_exception() {
    let mut p = program();
    let body = lib_func_body(&mut p);
    body.insert(
        0,
        Stmt::probe(Probe::Forge {
            call: VaultCall::StopProtect,
        }),
    );
    body.insert(
        1,
        Stmt::probe(Probe::Forge {
            call: VaultCall::UnregisterStack,
        }),
    );
    let out = instrumented(&p);
    let identity = framevault::exec::synthesize_identity(&out);
    let strict = RunOptions {
        strict: true,
        ..RunOptions::default()
    };
    let o = run(
        &out,
        identity.clone(),
        VaultState::new(identity.clone()),
        "main",
        &strict,
    );
    assert_eq!(o.report.exceptions().count(), 1);
    assert!(o
        .report
        .halted
        .as_deref()
        .unwrap()
        .starts_with("strict mode"));
    let o = run(
        &out,
        identity.clone(),
        VaultState::new(identity),
        "main",
        &RunOptions::default(),
    );
    assert_eq!(o.report.exceptions().count(), 2);
    assert!(o.report.halted.is_none());
}

#[test]
fn forged_growth_across_window_is_index_mismatch() {
    // lib_func registers its own frame inside the window; the sensitive
    // caller's stop_protect must then fail
    let mut p = program();
    let body = lib_func_body(&mut p);
    body.insert(
        0,
        Stmt::probe(Probe::Forge {
            call: VaultCall::RegisterStack { all: true },
        }),
    );
    let out = instrumented(&p);
    let identity = framevault::exec::synthesize_identity(&out);
    let o = run(
        &out,
        identity.clone(),
        VaultState::new(identity),
        "main",
        &RunOptions::default(),
    );
    let kinds: Vec<_> = o.report.exceptions().map(|e| (e.syscall, e.kind)).collect();
    assert_eq!(
        kinds[0],
        (Syscall::StopProtect, ExceptionKind::IndexMismatch),
        "{}",
        o.report.to_text()
    );
    // no integrity verdict for a window that never closed
    assert_eq!(o.report.integrity_breaches().count(), 0);
    let v = o
        .report
        .violations
        .iter()
        .find(|v| matches!(v, Violation::Vault { .. }))
        .unwrap();
    assert!(matches!(v, Violation::Vault { forged: false, .. }));
}

#[test]
fn writes_through_value_bytes() {
    let v = Value::Bytes("1f000000".into());
    assert_eq!(
        serde_json::to_string(&v).unwrap(),
        r#"{"bytes":"1f000000"}"#
    );
}
