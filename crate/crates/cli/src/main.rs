use usbd_cli::error::CliError;

fn main() {
    if let Some(n) = std::env::var("USBD_THREADS").ok().and_then(|v| v.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match usbd_cli::run(std::env::args().skip(1).collect()) {
        Ok(()) | Err(CliError::Help) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
