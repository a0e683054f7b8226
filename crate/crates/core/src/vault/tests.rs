use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::memory::{HEAP_BASE, STACK_BASE};
use crate::oracle::SnapshotVault;

const MAP: &str = "
main         0x401000 0x401200
pwdgenerator 0x401200 0x401400
lib_func     0x401400 0x401500
g            0x401500 0x401600
";

fn table() -> Arc<IdentityTable> {
    Arc::new(IdentityTable::load_image_map(MAP).unwrap())
}

fn pc(name: &str) -> Address {
    let t = table();
    t.span(t.id_of(name).unwrap()).unwrap().lo.add(3)
}

fn id(name: &str) -> FunctionId {
    table().id_of(name).unwrap()
}

/// pwdgenerator's frame: passwd[256], id (8), age (4), 16 bytes of metadata.
struct Fig3 {
    mem: ProcessMemory,
    frame: StackFrame,
    passwd: Address,
    id_slot: Address,
    age: Address,
    heap: Address,
}

const HEAP_LEN: u64 = 64;

fn fig3_memory() -> Fig3 {
    let mut mem = ProcessMemory::new();
    let frame = mem
        .push_frame(id("pwdgenerator"), 256 + 8 + 4 + 16)
        .unwrap();
    let passwd = frame.base.sub(16 + 256);
    let id_slot = passwd.sub(8);
    let age = id_slot.sub(4);
    assert_eq!(age, frame.top);
    let heap = mem.alloc(HEAP_LEN).unwrap().base;
    mem.write_bytes(passwd, &[0x53; 256]).unwrap();
    mem.write_bytes(id_slot, &heap.0.to_le_bytes()).unwrap();
    mem.write_bytes(age, &[30, 0, 0, 0]).unwrap();
    mem.write_bytes(heap, &[0x49; HEAP_LEN as usize]).unwrap();
    mem.write_bytes(frame.base.sub(16), &[0xEE; 16]).unwrap();
    Fig3 {
        mem,
        frame,
        passwd,
        id_slot,
        age,
        heap,
    }
}

fn fig3_registered<K: Kernel>(kernel: &mut K, f: &Fig3) {
    let p = pc("pwdgenerator");
    kernel
        .register_stack(p, true, f.frame.base, f.frame.top)
        .unwrap();
    kernel.register_memory(p, f.heap, HEAP_LEN, false).unwrap();
    kernel
        .register_memory_exception(p, f.age, 4, false)
        .unwrap();
}

#[test]
fn register_stack_appends_entry() {
    let mut v = VaultState::new(table());
    let f = fig3_memory();
    v.register_stack(pc("pwdgenerator"), true, f.frame.base, f.frame.top)
        .unwrap();
    assert_eq!(
        v.register_list(),
        &[RegisterEntry::Stack {
            owner: id("pwdgenerator"),
            frame_base: f.frame.base,
            frame_top: f.frame.top,
            all: true
        }]
    );
    // nested sensitive function appends after
    let top = f.frame.top.sub(40);
    v.register_stack(pc("g"), false, f.frame.top, top).unwrap();
    assert_eq!(v.register_list().len(), 2);
    assert_eq!(v.register_list()[1].owner(), id("g"));
}

#[test]
fn unknown_caller_leaves_lists_unchanged() {
    let mut v = VaultState::new(table());
    let f = fig3_memory();
    let err = v
        .register_stack(Address(0x500000), true, f.frame.base, f.frame.top)
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::UnknownCaller);
    assert!(v.register_list().is_empty());
    assert_eq!(v.exceptions().len(), 1);
}

#[test]
fn register_stack_rejects_non_stack_bounds() {
    let mut v = VaultState::new(table());
    let err = v
        .register_stack(
            pc("main"),
            true,
            Address(HEAP_BASE + 64),
            Address(HEAP_BASE),
        )
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::InvalidRegion);
    let err = v
        .register_stack(
            pc("main"),
            true,
            Address(STACK_BASE - 64),
            Address(STACK_BASE - 32),
        )
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::InvalidRegion);
}

#[test]
fn register_memory_checks_identity() {
    let mut v = VaultState::new(table());
    let f = fig3_memory();
    let p = pc("pwdgenerator");
    // no stack entry yet
    let err = v.register_memory(p, f.heap, HEAP_LEN, false).unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IdentityMismatch);

    v.register_stack(p, true, f.frame.base, f.frame.top)
        .unwrap();
    v.register_memory(p, f.heap, HEAP_LEN, false).unwrap();
    assert!(matches!(
        v.register_list()[1],
        RegisterEntry::Memory {
            len: HEAP_LEN,
            read_only: false,
            ..
        }
    ));
    let err = v
        .register_memory(pc("lib_func"), f.passwd, 256, false)
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IdentityMismatch);
    assert_eq!(err.syscall, Syscall::RegisterMemory);
    assert_eq!(v.register_list().len(), 2);

    v.register_memory(p, f.passwd, 256, true).unwrap();
    assert!(matches!(
        v.register_list()[2],
        RegisterEntry::Memory {
            read_only: true,
            ..
        }
    ));
}

#[test]
fn register_memory_rejects_bad_regions() {
    let mut v = VaultState::new(table());
    let f = fig3_memory();
    let p = pc("pwdgenerator");
    v.register_stack(p, true, f.frame.base, f.frame.top)
        .unwrap();
    for (base, len) in [
        (f.heap, 0),
        (Address(0x401000), 4),
        (f.frame.top.sub(2), 4),
        (Address(0x10), 1),
    ] {
        let err = v.register_memory(p, base, len, false).unwrap_err();
        assert_eq!(err.kind, ExceptionKind::InvalidRegion, "{base} +{len}");
    }
    assert_eq!(v.register_list().len(), 1);
}

#[test]
fn register_memory_exception_must_stay_in_frame() {
    let mut v = VaultState::new(table());
    let f = fig3_memory();
    let p = pc("pwdgenerator");
    v.register_stack(p, true, f.frame.base, f.frame.top)
        .unwrap();
    v.register_memory_exception(p, f.age, 4, false).unwrap();
    let err = v
        .register_memory_exception(p, f.frame.top.sub(2), 4, false)
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::RegionOutOfFrame);
    let err = v
        .register_memory_exception(p, f.heap, 4, false)
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::RegionOutOfFrame);
    let err = v
        .register_memory_exception(pc("lib_func"), f.age, 4, false)
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IdentityMismatch);
    assert_eq!(v.register_list().len(), 2);
}

// Expected values below were worked out by stepping through the two passes
// of start_protect by hand on the three-entry list:
//   pass 1: save frame (284 bytes), save heap object (64), save age (4)
//   pass 2: clear frame, clear heap object, write age back (consumes its record)
#[test]
fn start_protect_on_fig3_state() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();

    let frame = f.mem.read_bytes(f.frame.top, f.frame.size()).unwrap();
    let age_off = (f.age.0 - f.frame.top.0) as usize;
    for (i, b) in frame.iter().enumerate() {
        let expected = if (age_off..age_off + 4).contains(&i) {
            [30, 0, 0, 0][i - age_off]
        } else {
            0
        };
        assert_eq!(*b, expected, "frame byte {i}");
    }
    assert_eq!(
        f.mem.read_bytes(f.heap, HEAP_LEN).unwrap(),
        vec![0; HEAP_LEN as usize]
    );

    let recs = v.save_buffer().records();
    assert_eq!(recs.len(), 3);
    assert_eq!(
        (recs[0].source, recs[0].len, recs[0].is_consumed()),
        (f.frame.top, 284, false)
    );
    assert_eq!(
        (recs[1].source, recs[1].len, recs[1].is_consumed()),
        (f.heap, 64, false)
    );
    assert_eq!(
        (recs[2].source, recs[2].len, recs[2].is_consumed()),
        (f.age, 4, true)
    );
    assert_eq!(
        v.protect_list(),
        &[ProtectEntry {
            caller: id("pwdgenerator"),
            register_index: 3
        }]
    );
    assert_eq!(v.stats().bytes_saved, 284 + 64 + 4);
    assert_eq!(v.stats().bytes_cleared, 284 + 64);
}

#[test]
fn start_protect_with_empty_list() {
    let mut f = fig3_memory();
    let before = f.mem.digest();
    let mut v = VaultState::new(table());
    v.start_protect(&mut f.mem, pc("main")).unwrap();
    assert_eq!(
        v.protect_list(),
        &[ProtectEntry {
            caller: id("main"),
            register_index: 0
        }]
    );
    assert_eq!(f.mem.digest(), before);
    assert!(v.save_buffer().is_empty());
}

#[test]
fn stop_protect_restores_and_keeps_callee_exception_writes() {
    let mut f = fig3_memory();
    let original = f.mem.read_bytes(f.frame.top, f.frame.size()).unwrap();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();

    // lib_func: legitimate write to age, garbage over the rest
    f.mem.write_bytes(f.passwd, &[0xFF; 40]).unwrap();
    f.mem.write_bytes(f.id_slot, &[1; 8]).unwrap();
    f.mem.write_bytes(f.heap, &[2; 10]).unwrap();
    f.mem.write_bytes(f.age, &[31, 0, 0, 0]).unwrap();

    v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    let mut expected = original;
    expected[0..4].copy_from_slice(&[31, 0, 0, 0]);
    assert_eq!(
        f.mem.read_bytes(f.frame.top, f.frame.size()).unwrap(),
        expected
    );
    assert_eq!(
        f.mem.read_bytes(f.heap, HEAP_LEN).unwrap(),
        vec![0x49; HEAP_LEN as usize]
    );
    assert!(v.protect_list().is_empty());
    assert!(v.save_buffer().fully_drained());
}

#[test]
fn stop_protect_by_other_function_is_rejected() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    let before = f.mem.digest();
    let err = v.stop_protect(&mut f.mem, pc("lib_func")).unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IdentityMismatch);
    assert_eq!(f.mem.digest(), before);
    assert_eq!(v.protect_list().len(), 1);
}

#[test]
fn forged_growth_is_an_index_mismatch() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    // the untrusted callee registers a frame of its own, then tries to stop
    let callee = f.mem.push_frame(id("lib_func"), 32).unwrap();
    v.register_stack(pc("lib_func"), true, callee.base, callee.top)
        .unwrap();
    v.register_memory(pc("lib_func"), callee.top, 8, false)
        .unwrap();
    f.mem.pop_frame().unwrap();
    let before = f.mem.digest();
    let err = v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IndexMismatch);
    assert_eq!(v.exceptions().len(), 1);
    assert_eq!(f.mem.digest(), before);
}

#[test]
fn stop_protect_without_window() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    let err = v.stop_protect(&mut f.mem, pc("main")).unwrap_err();
    assert_eq!(err.kind, ExceptionKind::EmptyProtectList);
}

#[test]
fn unregister_stack_drops_group_and_scrubs_frame() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap();

    let err = v.unregister_stack(&mut f.mem, pc("lib_func")).unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IdentityMismatch);
    assert_eq!(f.mem.read_bytes(f.passwd, 1).unwrap(), vec![0x53]);

    v.unregister_stack(&mut f.mem, pc("pwdgenerator")).unwrap();
    assert!(v.register_list().is_empty());
    f.mem.pop_frame().unwrap();
    assert!(f
        .mem
        .read_bytes(f.frame.top, f.frame.size())
        .unwrap()
        .iter()
        .all(|&b| b == 0));

    let s = v.stats();
    let counts: Vec<u64> = Syscall::ALL.iter().map(|&c| s.count(c)).collect();
    assert_eq!(counts, vec![1, 2, 1, 1, 1, 1]);
}

#[test]
fn fig3_single_run_counts() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    assert_eq!(v.stats(), &SyscallStats::default());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    v.unregister_stack(&mut f.mem, pc("pwdgenerator")).unwrap();
    let s = v.stats();
    for call in Syscall::ALL {
        assert_eq!(s.count(call), 1, "{call}");
    }
    assert_eq!(s.total(), 6);
    // frame + id object + age, all copied by the save pass
    assert_eq!(s.bytes_saved, 284 + 64 + 4);
    // frame and id object at start_protect, frame again at unregister_stack
    assert_eq!(s.bytes_cleared, 284 + 64 + 284);
}

#[test]
fn read_only_memory_is_saved_not_cleared() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    let p = pc("pwdgenerator");
    v.register_stack(p, false, f.frame.base, f.frame.top)
        .unwrap();
    v.register_memory(p, f.passwd, 256, true).unwrap();
    v.register_memory(p, f.heap, HEAP_LEN, false).unwrap();
    v.start_protect(&mut f.mem, p).unwrap();
    assert_eq!(f.mem.read_bytes(f.passwd, 256).unwrap(), vec![0x53; 256]);
    assert_eq!(
        f.mem.read_bytes(f.heap, HEAP_LEN).unwrap(),
        vec![0; HEAP_LEN as usize]
    );
    // finegrained: unregistered frame bytes stay visible
    assert_eq!(f.mem.read_bytes(f.age, 1).unwrap(), vec![30]);
    f.mem.write_bytes(f.passwd, &[0; 256]).unwrap();
    f.mem.write_bytes(f.age, &[99]).unwrap();
    v.stop_protect(&mut f.mem, p).unwrap();
    assert_eq!(f.mem.read_bytes(f.passwd, 256).unwrap(), vec![0x53; 256]);
    assert_eq!(
        f.mem.read_bytes(f.heap, HEAP_LEN).unwrap(),
        vec![0x49; HEAP_LEN as usize]
    );
    assert_eq!(f.mem.read_bytes(f.age, 1).unwrap(), vec![99]);
    assert_eq!(v.stats().bytes_saved, 256 + HEAP_LEN);
}

#[test]
fn read_only_exception_is_write_protected() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    let p = pc("pwdgenerator");
    v.register_stack(p, true, f.frame.base, f.frame.top)
        .unwrap();
    v.register_memory_exception(p, f.age, 4, true).unwrap();
    v.start_protect(&mut f.mem, p).unwrap();
    assert_eq!(f.mem.read_bytes(f.age, 4).unwrap(), vec![30, 0, 0, 0]);
    f.mem.write_bytes(f.age, &[1, 2, 3, 4]).unwrap();
    v.stop_protect(&mut f.mem, p).unwrap();
    assert_eq!(f.mem.read_bytes(f.age, 4).unwrap(), vec![30, 0, 0, 0]);
}

// Inner window footprint: g's frame (all=True, 40 bytes) plus one 8-byte
// heap object registered by g. Only those 48 bytes may be copied.
#[test]
fn nested_start_protect_saves_only_new_entries() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    let outer_saved = v.save_buffer().produced_bytes();
    assert_eq!(outer_saved, 352);

    let _callee = f.mem.push_frame(id("lib_func"), 24).unwrap();
    let g = f.mem.push_frame(id("g"), 40).unwrap();
    let g_obj = f.mem.alloc(8).unwrap();
    f.mem.write_bytes(g.top, &[7; 24]).unwrap();
    f.mem.write_bytes(g_obj.base, &[6; 8]).unwrap();
    v.register_stack(pc("g"), true, g.base, g.top).unwrap();
    v.register_memory(pc("g"), g_obj.base, 8, false).unwrap();
    v.start_protect(&mut f.mem, pc("g")).unwrap();
    assert_eq!(v.save_buffer().produced_bytes() - outer_saved, 48);
    assert_eq!(v.protect_list()[1].register_index, 5);

    f.mem.write_bytes(g.top, &[0xAA; 40]).unwrap();
    v.stop_protect(&mut f.mem, pc("g")).unwrap();
    assert_eq!(f.mem.read_bytes(g.top, 24).unwrap(), vec![7; 24]);
    assert_eq!(f.mem.read_bytes(g_obj.base, 8).unwrap(), vec![6; 8]);
    // outer frame still hidden
    assert_eq!(f.mem.read_bytes(f.passwd, 4).unwrap(), vec![0; 4]);

    v.unregister_stack(&mut f.mem, pc("g")).unwrap();
    f.mem.pop_frame().unwrap();
    f.mem.pop_frame().unwrap();
    v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    assert_eq!(f.mem.read_bytes(f.passwd, 256).unwrap(), vec![0x53; 256]);
    assert!(v.save_buffer().fully_drained());
}

#[test]
fn both_kernels_agree_on_fig3() {
    let run = |kernel: &mut dyn FnMut(&mut Fig3)| {
        let mut f = fig3_memory();
        kernel(&mut f);
        f.mem
    };
    let algo = run(&mut |f| {
        let mut v = VaultState::new(table());
        fig3_registered(&mut v, f);
        v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
        f.mem.write_bytes(f.age, &[1; 200]).unwrap();
        v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    });
    let snap = run(&mut |f| {
        let mut v = SnapshotVault::new(table());
        fig3_registered(&mut v, f);
        v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
        f.mem.write_bytes(f.age, &[1; 200]).unwrap();
        v.stop_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    });
    assert_eq!(algo.first_difference(&snap), None);
}

// ---------------------------------------------------------------------------
// Randomized scenarios: one or two nested windows over random registrations.

#[derive(Clone, Debug)]
enum Piece {
    Plain(u64),
    Memory(u64, bool),
    Exception(u64, bool),
}

#[derive(Clone, Debug)]
struct FrameSpec {
    all: bool,
    pieces: Vec<Piece>,
    heap: Vec<(u64, bool)>,
}

impl FrameSpec {
    fn size(&self) -> u64 {
        self.pieces
            .iter()
            .map(|p| match *p {
                Piece::Plain(n) | Piece::Memory(n, _) | Piece::Exception(n, _) => n,
            })
            .sum()
    }
}

fn frame_spec() -> impl Strategy<Value = FrameSpec> {
    let piece = (1u64..48, 0u8..5, any::<bool>()).prop_map(|(n, k, ro)| match k {
        0 | 1 => Piece::Plain(n),
        2 | 3 => Piece::Memory(n, ro),
        _ => Piece::Exception(n, ro),
    });
    (
        any::<bool>(),
        proptest::collection::vec(piece, 1..8),
        proptest::collection::vec((1u64..64, any::<bool>()), 0..3),
    )
        .prop_map(|(all, pieces, heap)| FrameSpec { all, pieces, heap })
}

/// Per-byte expectation for one registered frame.
#[derive(Default)]
struct Expect {
    hidden: Vec<u64>,
    visible: Vec<u64>,
    restored: Vec<u64>,
    callee_kept: Vec<u64>,
}

struct Built {
    frame: StackFrame,
    expect: Expect,
    fails: usize,
}

fn register_frame<K: Kernel>(
    k: &mut K,
    mem: &mut ProcessMemory,
    owner: &str,
    spec: &FrameSpec,
    fill: u8,
) -> Built {
    let p = pc(owner);
    let frame = mem.push_frame(id(owner), spec.size()).unwrap();
    let mut byte = fill;
    let mut next = || {
        byte = byte.wrapping_add(1).max(1);
        byte
    };
    for a in frame.top.0..frame.base.0 {
        mem.write_bytes(Address(a), &[next()]).unwrap();
    }
    k.register_stack(p, spec.all, frame.base, frame.top)
        .unwrap();
    let mut e = Expect::default();
    let mut fails = 0;
    let mut at = frame.top.0;
    for piece in &spec.pieces {
        let (n, r) = match *piece {
            Piece::Plain(n) => {
                let r = at..at + n;
                if spec.all {
                    e.hidden.extend(r.clone());
                    e.restored.extend(r);
                }
                (n, None)
            }
            Piece::Memory(n, ro) => {
                let r = at..at + n;
                (
                    n,
                    Some((k.register_memory(p, Address(at), n, ro), r, ro, false)),
                )
            }
            Piece::Exception(n, ro) => {
                let r = at..at + n;
                (
                    n,
                    Some((
                        k.register_memory_exception(p, Address(at), n, ro),
                        r,
                        ro,
                        true,
                    )),
                )
            }
        };
        if let Some((res, r, ro, exception)) = r {
            res.unwrap();
            match (exception, ro, spec.all) {
                (false, false, _) => {
                    e.hidden.extend(r.clone());
                    e.restored.extend(r);
                }
                (false, true, true) => {
                    e.hidden.extend(r.clone());
                    e.restored.extend(r);
                }
                (false, true, false) => {
                    e.visible.extend(r.clone());
                    e.restored.extend(r);
                }
                (true, true, true) => {
                    e.visible.extend(r.clone());
                    e.restored.extend(r);
                }
                (true, false, true) => {
                    e.visible.extend(r.clone());
                    e.callee_kept.extend(r);
                }
                (true, _, false) => e.visible.extend(r),
            }
        }
        at += n;
    }
    for &(len, ro) in &spec.heap {
        let obj = mem.alloc(len).unwrap();
        let data: Vec<u8> = (0..len).map(|_| next()).collect();
        mem.write_bytes(obj.base, &data).unwrap();
        k.register_memory(p, obj.base, len, ro).unwrap();
        let r = obj.base.0..obj.base.0 + len;
        if ro {
            e.visible.extend(r.clone());
        } else {
            e.hidden.extend(r.clone());
        }
        e.restored.extend(r);
    }
    // a forged call from the untrusted function must change nothing
    if k.register_memory(pc("lib_func"), frame.top, 1, false)
        .is_err()
    {
        fails += 1;
    }
    Built {
        frame,
        expect: e,
        fails,
    }
}

fn scribble(mem: &mut ProcessMemory, frame: &StackFrame, heap_from: usize, salt: u8) {
    let garbage: Vec<u8> = (0..frame.size()).map(|i| (i as u8) ^ salt | 0x80).collect();
    mem.write_bytes(frame.top, &garbage).unwrap();
    let objs: Vec<_> = mem.heap_objects()[heap_from..].to_vec();
    for o in objs {
        mem.write_bytes(o.base, &vec![salt | 1; o.len as usize])
            .unwrap();
    }
}

fn run_scenario<K: Kernel>(
    mut k: K,
    outer: &FrameSpec,
    inner: Option<&FrameSpec>,
    check_growth: bool,
) -> Result<(ProcessMemory, K), TestCaseError> {
    let mut mem = ProcessMemory::new();
    let a = register_frame(&mut k, &mut mem, "pwdgenerator", outer, 0x10);
    let orig_a = mem.clone();
    let heap_a = 0;
    k.start_protect(&mut mem, pc("pwdgenerator")).unwrap();
    for &b in &a.expect.hidden {
        prop_assert_eq!(
            mem.peek_byte(Address(b)),
            0,
            "outer byte {:#x} not hidden",
            b
        );
    }
    for &b in &a.expect.visible {
        prop_assert_eq!(mem.peek_byte(Address(b)), orig_a.peek_byte(Address(b)));
    }
    scribble(&mut mem, &a.frame, heap_a, 0x5A);
    let scribbled_a = mem.clone();

    if let Some(inner) = inner {
        mem.push_frame(id("lib_func"), 8).unwrap();
        let heap_b = mem.heap_objects().len();
        let b = register_frame(&mut k, &mut mem, "g", inner, 0x70);
        let orig_b = mem.clone();
        let before = k.saved_bytes();
        k.start_protect(&mut mem, pc("g")).unwrap();
        let footprint: u64 = k.registry().register_list()
            [k.registry().protect_list()[0].register_index..]
            .iter()
            .map(RegisterEntry::footprint)
            .sum();
        if check_growth {
            prop_assert_eq!(k.saved_bytes() - before, footprint);
        }
        for &x in &b.expect.hidden {
            prop_assert_eq!(mem.peek_byte(Address(x)), 0);
        }
        scribble(&mut mem, &b.frame, heap_b, 0x33);
        let scribbled_b = mem.clone();
        k.stop_protect(&mut mem, pc("g")).unwrap();
        for &x in &b.expect.restored {
            prop_assert_eq!(mem.peek_byte(Address(x)), orig_b.peek_byte(Address(x)));
        }
        for &x in &b.expect.callee_kept {
            prop_assert_eq!(mem.peek_byte(Address(x)), scribbled_b.peek_byte(Address(x)));
        }
        k.unregister_stack(&mut mem, pc("g")).unwrap();
        mem.pop_frame().unwrap();
        mem.pop_frame().unwrap();
        prop_assert_eq!(b.fails, 1);
    }

    let before_stop = mem.digest();
    prop_assert!(k.stop_protect(&mut mem, pc("lib_func")).is_err());
    prop_assert_eq!(mem.digest(), before_stop);
    k.stop_protect(&mut mem, pc("pwdgenerator")).unwrap();
    for &x in &a.expect.restored {
        prop_assert_eq!(mem.peek_byte(Address(x)), orig_a.peek_byte(Address(x)));
    }
    for &x in &a.expect.callee_kept {
        prop_assert_eq!(mem.peek_byte(Address(x)), scribbled_a.peek_byte(Address(x)));
    }
    prop_assert_eq!(a.fails, 1);
    Ok((mem, k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn protection_properties(outer in frame_spec(), inner in proptest::option::of(frame_spec())) {
        let (algo_mem, algo) = run_scenario(VaultState::new(table()), &outer, inner.as_ref(), true)?;
        let (snap_mem, _) = run_scenario(SnapshotVault::new(table()), &outer, inner.as_ref(), false)?;
        prop_assert_eq!(algo_mem.first_difference(&snap_mem), None);
        prop_assert!(algo.save_buffer().fully_drained());
        prop_assert!(algo.diagnostics().is_empty());
    }

    #[test]
    fn exceptions_never_mutate_memory(
        calls in proptest::collection::vec((0usize..6, 0usize..4, 0u64..400, 1u64..64, any::<bool>()), 1..40)
    ) {
        let mut f = fig3_memory();
        let mut v = VaultState::new(table());
        let names = ["main", "pwdgenerator", "lib_func", "g"];
        for (call, who, off, len, flag) in calls {
            let p = if who == 3 { Address(0x400000) } else { pc(names[who]) };
            let base = f.frame.top.add(off);
            let before = f.mem.digest();
            let lists = (v.register_list().to_vec(), v.protect_list().to_vec());
            let res = match call {
                0 => v.register_stack(p, flag, f.frame.base, f.frame.top),
                1 => v.register_memory(p, base, len, flag),
                2 => v.register_memory_exception(p, base, len, flag),
                3 => v.start_protect(&mut f.mem, p),
                4 => v.stop_protect(&mut f.mem, p),
                _ => v.unregister_stack(&mut f.mem, p),
            };
            if res.is_err() {
                prop_assert_eq!(f.mem.digest(), before);
                prop_assert_eq!((v.register_list().to_vec(), v.protect_list().to_vec()), lists);
            }
        }
    }

    #[test]
    fn protect_list_indices_are_monotone(
        steps in proptest::collection::vec(any::<bool>(), 1..30)
    ) {
        let mut f = fig3_memory();
        let mut v = VaultState::new(table());
        let p = pc("pwdgenerator");
        v.register_stack(p, true, f.frame.base, f.frame.top).unwrap();
        for open in steps {
            if open {
                v.start_protect(&mut f.mem, p).unwrap();
            } else {
                let _ = v.stop_protect(&mut f.mem, p);
            }
            let idx: Vec<usize> = v.protect_list().iter().map(|e| e.register_index).collect();
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}

#[test]
fn unregister_inside_own_window_is_refused() {
    let mut f = fig3_memory();
    let mut v = VaultState::new(table());
    fig3_registered(&mut v, &f);
    v.start_protect(&mut f.mem, pc("pwdgenerator")).unwrap();
    let before = f.mem.digest();
    let err = v
        .unregister_stack(&mut f.mem, pc("pwdgenerator"))
        .unwrap_err();
    assert_eq!(err.kind, ExceptionKind::IndexMismatch);
    assert_eq!(v.register_list().len(), 3);
    assert_eq!(f.mem.digest(), before);
}
