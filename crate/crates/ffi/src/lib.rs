#[no_mangle]
pub extern "C" fn olb_placeholder() -> u32 { overlab::placeholder() }
