use clap::Parser;

fn main() {
    let cli = implicitreg_cli::Cli::parse();
    std::process::exit(implicitreg_cli::main_with(cli));
}
