fn main() {
    // Die quietly on a closed pipe (`pathode report | head`) instead of
    // panicking in println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(pathode::cli::execute(std::env::args_os()));
}
