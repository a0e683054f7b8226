//! Fixtures shared by the benches in `benches/`.

use std::sync::Arc;

use framevault::{
    parse_lists, parse_program, Address, IdentityTable, Kernel, Lists, ProcessMemory, Program,
    VaultState,
};

const MAP: &str = "f 0x401000 0x401100\nu 0x401100 0x401200\n";

/// A caller `f` with a registered whole frame of `frame` bytes, filled
/// with nonzero data, ready for start_protect.
pub struct Window {
    pub kernel: VaultState,
    pub mem: ProcessMemory,
    pub pc: Address,
}

impl Window {
    pub fn new(frame: u64) -> Window {
        let identity = Arc::new(IdentityTable::load_image_map(MAP).expect("static map"));
        let f = identity.id_of("f").unwrap();
        let pc = identity.span(f).unwrap().lo.add(1);
        let mut mem = ProcessMemory::new();
        let sf = mem.push_frame(f, frame).expect("frame fits the stack");
        mem.write_bytes(sf.top, &vec![0x5A; (frame - 16) as usize])
            .unwrap();
        let mut kernel = VaultState::new(identity);
        kernel.register_stack(pc, true, sf.base, sf.top).unwrap();
        Window { kernel, mem, pc }
    }

    pub fn round_trip(&mut self) {
        self.kernel.start_protect(&mut self.mem, self.pc).unwrap();
        self.kernel.stop_protect(&mut self.mem, self.pc).unwrap();
    }
}

const PWD_PROGRAM: &str = include_str!("../../../scenarios/pwdgenerator/program.json");
const PWD_UNTRUSTED: &str = include_str!("../../../scenarios/pwdgenerator/UntrustedList");
const PWD_SENSITIVE: &str = include_str!("../../../scenarios/pwdgenerator/SensitiveList");

pub fn pwdgenerator() -> (Program, Lists) {
    (
        parse_program(PWD_PROGRAM).expect("bundled program parses"),
        parse_lists(PWD_UNTRUSTED, PWD_SENSITIVE).expect("bundled lists parse"),
    )
}
