use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = tags_cli::Cli::parse();
    let stdout = std::io::stdout();
    tags_cli::run(cli, &mut stdout.lock())
}
