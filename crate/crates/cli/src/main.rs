#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(pifs_cli::main_with_args(std::env::args_os()));
}
