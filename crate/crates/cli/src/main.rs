// SPDX-License-Identifier: Apache-2.0

use tale_cli::config::Env;

fn main() {
    let code = tale_cli::run(
        std::env::args_os(),
        &Env::from_process(),
        &mut std::io::stdin().lock(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    std::process::exit(code);
}
