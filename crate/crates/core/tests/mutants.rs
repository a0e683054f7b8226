//! Broken kernels the executor must catch.

use framevault::exec::{run, RunOptions};
use framevault::fuzz::generate;
use framevault::memory::{Address, ProcessMemory};
use framevault::vault::Registry;
use framevault::{FuzzConfig, Kernel, VaultException, VaultState};

#[derive(Clone, Copy, PartialEq)]
enum Fault {
    SkipClear,
    SkipRestore,
}

struct Broken {
    inner: VaultState,
    fault: Fault,
}

impl Kernel for Broken {
    fn register_stack(
        &mut self,
        pc: Address,
        all: bool,
        base: Address,
        top: Address,
    ) -> Result<(), VaultException> {
        self.inner.register_stack(pc, all, base, top)
    }

    fn register_memory(
        &mut self,
        pc: Address,
        base: Address,
        len: u64,
        ro: bool,
    ) -> Result<(), VaultException> {
        self.inner.register_memory(pc, base, len, ro)
    }

    fn register_memory_exception(
        &mut self,
        pc: Address,
        base: Address,
        len: u64,
        ro: bool,
    ) -> Result<(), VaultException> {
        self.inner.register_memory_exception(pc, base, len, ro)
    }

    fn unregister_stack(
        &mut self,
        mem: &mut ProcessMemory,
        pc: Address,
    ) -> Result<(), VaultException> {
        self.inner.unregister_stack(mem, pc)
    }

    fn start_protect(
        &mut self,
        mem: &mut ProcessMemory,
        pc: Address,
    ) -> Result<(), VaultException> {
        let before = mem.clone();
        let r = self.inner.start_protect(mem, pc);
        if self.fault == Fault::SkipClear {
            *mem = before;
        }
        r
    }

    fn stop_protect(&mut self, mem: &mut ProcessMemory, pc: Address) -> Result<(), VaultException> {
        let before = mem.clone();
        let r = self.inner.stop_protect(mem, pc);
        if self.fault == Fault::SkipRestore {
            *mem = before;
        }
        r
    }

    fn registry(&self) -> &Registry {
        self.inner.registry()
    }

    fn saved_bytes(&self) -> u64 {
        self.inner.saved_bytes()
    }
}

fn detections(fault: Fault) -> (u64, u64) {
    let config = FuzzConfig {
        seed: 11,
        forged: false,
        ..FuzzConfig::default()
    };
    let (mut leaks, mut breaches) = (0, 0);
    for case in 0..30 {
        let sc = generate(&config, case);
        let out = sc.instrument().unwrap();
        let identity = sc.identity(&out).unwrap();
        let kernel = Broken {
            inner: VaultState::new(identity.clone()),
            fault,
        };
        let o = run(&out, identity, kernel, &sc.entry, &RunOptions::default());
        leaks += o.report.leaks().count() as u64;
        breaches += o.report.integrity_breaches().count() as u64;
    }
    (leaks, breaches)
}

#[test]
fn kernel_that_skips_clearing_leaks() {
    let (leaks, _) = detections(Fault::SkipClear);
    assert!(leaks > 0);
}

#[test]
fn kernel_that_skips_restoring_breaks_integrity() {
    let (leaks, breaches) = detections(Fault::SkipRestore);
    assert_eq!(leaks, 0);
    assert!(breaches > 0);
}
