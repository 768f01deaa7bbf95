// SPDX-License-Identifier: Apache-2.0

//! `wt`, a command-line client for the tale service.
//!
//! Exit status is 0 on success, 1 when the API or network fails and 2 on a
//! usage error. With `--json` every command writes exactly one JSON document
//! to stdout, errors included.

pub mod client;
pub mod config;

use std::ffi::OsString;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::client::{Client, ClientError};
use crate::config::{CliConfig, Env, FileConfig, Flags, Format};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "wt", version, about = "Client for the tale service")]
struct Cli {
    /// Base URL of the service.
    #[arg(long, global = true, value_name = "URL")]
    api_url: Option<String>,
    /// Bearer token (prefer WT_TOKEN or `wt login`).
    #[arg(long, global = true)]
    token: Option<String>,
    /// Config file to read and, for `login`, write.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exchange identity-provider credentials for a token and store it.
    Login(LoginArgs),
    /// Show the identity behind the current token.
    Whoami,
    /// Register a dataset by identifier and wait for the job.
    Register {
        identifier: String,
        /// Parent collection or folder (id or /path).
        #[arg(long)]
        parent: Option<String>,
        #[command(flatten)]
        wait: WaitArgs,
    },
    /// List a catalog path.
    Ls { path: String },
    #[command(subcommand)]
    Session(SessionCmd),
    #[command(subcommand)]
    Recipe(RecipeCmd),
    #[command(subcommand)]
    Image(ImageCmd),
    #[command(subcommand)]
    Tale(TaleCmd),
    #[command(subcommand)]
    Instance(InstanceCmd),
    #[command(subcommand)]
    Cache(CacheCmd),
    /// Show one job, or list the caller's jobs.
    Job { id: Option<String> },
}

#[derive(Args, Debug)]
struct LoginArgs {
    #[arg(long)]
    issuer: String,
    #[arg(long)]
    subject: String,
    /// Proof for the identity provider; read from stdin when absent.
    #[arg(long)]
    proof: Option<String>,
    /// Restrict the token to these scopes.
    #[arg(long = "scope")]
    scopes: Vec<String>,
}

#[derive(Args, Debug)]
struct WaitArgs {
    /// Return as soon as the job is accepted.
    #[arg(long)]
    no_wait: bool,
    /// Seconds to wait for the job.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

#[derive(Subcommand, Debug)]
enum SessionCmd {
    /// Create a data session over catalog nodes (ids or /paths).
    Create {
        #[arg(required = true)]
        roots: Vec<String>,
    },
}

#[derive(Subcommand, Debug)]
enum RecipeCmd {
    /// Add an environment recipe.
    Add {
        #[arg(long)]
        name: String,
        #[arg(long)]
        repo_url: String,
        #[arg(long)]
        commit: String,
        /// Recipe configuration as a JSON object.
        #[arg(long, default_value = "{}")]
        settings: String,
    },
}

#[derive(Subcommand, Debug)]
enum ImageCmd {
    /// Build an image from a recipe.
    Build {
        recipe: String,
        #[command(flatten)]
        wait: WaitArgs,
    },
}

#[derive(Subcommand, Debug)]
enum TaleCmd {
    /// Compose a tale from an image and a folder.
    Create {
        #[arg(long)]
        image: String,
        /// Folder id or /path.
        #[arg(long)]
        folder: String,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long = "author")]
        authors: Vec<String>,
        #[arg(long, default_value = "")]
        description: String,
        /// License of the environment, data and scripts (all three are
        /// needed to publish).
        #[arg(long, num_args = 3, value_names = ["ENV", "DATA", "SCRIPTS"])]
        licenses: Option<Vec<String>>,
    },
    /// Print a tale's manifest.
    Export { id: String },
    /// Create a tale from a manifest file, or `-` for stdin.
    Import { file: String },
    /// Publish a tale.
    Publish {
        id: String,
        #[arg(long)]
        identifier: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum InstanceCmd {
    /// Launch an instance of a tale.
    Launch {
        tale: String,
    },
    Suspend {
        id: String,
    },
    Resume {
        id: String,
    },
    /// Delete an instance.
    Rm {
        id: String,
    },
    /// Show one instance, or list them all.
    Status {
        id: Option<String>,
    },
}

#[derive(Subcommand, Debug)]
enum CacheCmd {
    /// Show cache occupancy and transfer totals.
    Stats,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Client(ClientError),
    Job { id: String, code: String, message: String },
    Timeout(String),
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Client(e)
    }
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }

    fn code(&self) -> String {
        match self {
            Failure::Usage(_) => "Usage".into(),
            Failure::Client(e) => e.code().into(),
            Failure::Job { code, .. } => code.clone(),
            Failure::Timeout(_) => "Timeout".into(),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Timeout(m) => m.clone(),
            Failure::Client(e) => e.message(),
            Failure::Job { id, message, .. } => format!("job {id} failed: {message}"),
        }
    }

    fn hint(&self) -> Option<&'static str> {
        match self {
            Failure::Client(ClientError::Network { .. }) => {
                Some("check that the service is running and the API URL is right, then retry")
            }
            Failure::Client(ClientError::Api { status: 401, .. }) => Some("run `wt login` or set WT_TOKEN"),
            Failure::Client(ClientError::Api { status: 503, .. }) | Failure::Timeout(_) => {
                Some("the service may be busy; retry shortly")
            }
            _ => None,
        }
    }
}

type Outcome = Result<(), Failure>;

struct Ctx<'a> {
    cfg: CliConfig,
    client: Client,
    stdin: &'a mut dyn Read,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn json(&self) -> bool {
        self.cfg.format == Format::Json
    }

    fn emit(&mut self, value: &Value, human: impl FnOnce(&Value) -> String) {
        let text = if self.json() { value.to_string() } else { human(value) };
        let _ = writeln!(self.out, "{}", text.trim_end());
    }

    /// Progress lines only appear in human mode.
    fn note(&mut self, line: String) {
        if !self.json() {
            let _ = writeln!(self.out, "{line}");
            let _ = self.out.flush();
        }
    }

    fn need_token(&self) -> Result<(), Failure> {
        if self.cfg.token.is_none() {
            return Err(Failure::Usage("no token: run `wt login` or set WT_TOKEN".into()));
        }
        Ok(())
    }

    /// Accepts a node id or an absolute catalog path.
    fn node_id(&self, reference: &str) -> Result<String, Failure> {
        if !reference.starts_with('/') {
            return Ok(reference.to_string());
        }
        let view = self.client.get_query("/v1/catalog", &[("path", reference)])?;
        str_field(&view["node"], "id")
    }

    fn wait_job(&mut self, id: &str, timeout: Duration) -> Result<Value, Failure> {
        let deadline = Instant::now() + timeout;
        loop {
            let job = self.client.get(&format!("/v1/job/{id}"))?;
            match job["status"].as_str() {
                Some("Done") => return Ok(job),
                Some("Failed") => {
                    return Err(Failure::Job {
                        id: id.to_string(),
                        code: job["error"]["code"].as_str().unwrap_or("JobFailed").to_string(),
                        message: job["error"]["message"].as_str().unwrap_or("unknown error").to_string(),
                    })
                }
                _ => {}
            }
            if Instant::now() >= deadline {
                return Err(Failure::Timeout(format!(
                    "job {id} still {} after {timeout:?}",
                    job["status"]
                )));
            }
            std::thread::sleep(Duration::from_millis(100));
        }
    }
}

fn str_field(v: &Value, key: &str) -> Result<String, Failure> {
    v[key].as_str().map(str::to_string).ok_or_else(|| {
        Failure::Client(ClientError::Decode {
            status: 200,
            message: format!("response has no {key:?}"),
        })
    })
}

fn parse_json(text: &str, what: &str) -> Result<Value, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::Usage(format!("{what} is not valid JSON: {e}")))
}

/// Runs one command line. `args` includes the program name.
pub fn run<I, T>(args: I, env: &Env, stdin: &mut dyn Read, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let flags = Flags {
        api_url: cli.api_url.clone(),
        token: cli.token.clone(),
        config: cli.config.clone(),
        json: cli.json,
    };
    let result = CliConfig::resolve(&flags, env).map_err(Failure::Usage).and_then(|cfg| {
        let client = Client::new(&cfg.api_url, cfg.token.clone());
        let mut ctx = Ctx {
            cfg,
            client,
            stdin,
            out: &mut *out,
        };
        dispatch(&mut ctx, cli.command)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            if cli.json {
                let mut body = json!({"error": {"code": f.code(), "message": f.message()}});
                if let Some(h) = f.hint() {
                    body["error"]["hint"] = json!(h);
                }
                let _ = writeln!(out, "{body}");
            } else {
                let _ = writeln!(err, "error: {}: {}", f.code(), f.message());
                if let Some(h) = f.hint() {
                    let _ = writeln!(err, "hint: {h}");
                }
            }
            f.exit_code()
        }
    }
}

fn dispatch(ctx: &mut Ctx<'_>, command: Command) -> Outcome {
    if !matches!(command, Command::Login(_)) {
        ctx.need_token()?;
    }
    match command {
        Command::Login(a) => login(ctx, a),
        Command::Whoami => {
            let me = ctx.client.get("/v1/whoami")?;
            ctx.emit(&me, |v| {
                format!(
                    "{}\nscopes: {}",
                    v["identity"].as_str().unwrap_or("?"),
                    join(&v["scopes"])
                )
            });
            Ok(())
        }
        Command::Register {
            identifier,
            parent,
            wait,
        } => register(ctx, &identifier, parent.as_deref(), &wait),
        Command::Ls { path } => {
            let view = ctx.client.get_query("/v1/catalog", &[("path", &path)])?;
            ctx.emit(&view, render_listing);
            Ok(())
        }
        Command::Session(SessionCmd::Create { roots }) => {
            let roots = roots.iter().map(|r| ctx.node_id(r)).collect::<Result<Vec<_>, _>>()?;
            let s = ctx.client.post("/v1/session", &json!({"roots": roots}))?;
            ctx.emit(&s, |v| format!("session {}", v["id"].as_str().unwrap_or("?")));
            Ok(())
        }
        Command::Recipe(RecipeCmd::Add {
            name,
            repo_url,
            commit,
            settings,
        }) => {
            let config = parse_json(&settings, "--settings")?;
            let body = json!({"name": name, "repo_url": repo_url, "commit_id": commit, "config": config});
            let r = ctx.client.post("/v1/recipe", &body)?;
            ctx.emit(&r, |v| format!("recipe {}", v["id"].as_str().unwrap_or("?")));
            Ok(())
        }
        Command::Image(ImageCmd::Build { recipe, wait }) => {
            let accepted = ctx.client.post("/v1/image", &json!({"recipe_id": recipe}))?;
            let image_id = str_field(&accepted["image"], "id")?;
            let image = if wait.no_wait {
                accepted["image"].clone()
            } else {
                let job = str_field(&accepted, "id")?;
                ctx.note(format!("image {image_id} building (job {job})"));
                ctx.wait_job(&job, Duration::from_secs(wait.timeout))?;
                ctx.client.get(&format!("/v1/image/{image_id}"))?
            };
            ctx.emit(&image, |v| {
                format!(
                    "image {} {} {}",
                    v["id"].as_str().unwrap_or("?"),
                    v["status"].as_str().unwrap_or("?"),
                    v["digest"].as_str().unwrap_or("-")
                )
            });
            Ok(())
        }
        Command::Tale(cmd) => tale(ctx, cmd),
        Command::Instance(cmd) => instance(ctx, cmd),
        Command::Cache(CacheCmd::Stats) => {
            let s = ctx.client.get("/v1/cache/stats")?;
            ctx.emit(&s, |v| {
                let mut text = format!(
                    "used {} of {} bytes, {} entries ({} present), {} locked",
                    v["used"], v["capacity"], v["entries"], v["present"], v["locked_entries"]
                );
                if let Some(map) = v["transferred"].as_object() {
                    for (k, n) in map {
                        text.push_str(&format!("\ntransferred {k}: {n} bytes"));
                    }
                }
                for w in v["warnings"].as_array().into_iter().flatten() {
                    text.push_str(&format!("\nwarning: {}", w.as_str().unwrap_or_default()));
                }
                text
            });
            Ok(())
        }
        Command::Job { id: Some(id) } => {
            let job = ctx.client.get(&format!("/v1/job/{id}"))?;
            ctx.emit(&job, render_job);
            Ok(())
        }
        Command::Job { id: None } => {
            let jobs = ctx.client.get("/v1/job")?;
            ctx.emit(&jobs, |v| {
                v.as_array()
                    .into_iter()
                    .flatten()
                    .map(render_job)
                    .collect::<Vec<_>>()
                    .join("\n")
            });
            Ok(())
        }
    }
}

fn login(ctx: &mut Ctx<'_>, a: LoginArgs) -> Outcome {
    let proof = match a.proof {
        Some(p) => p,
        None => {
            let mut line = String::new();
            BufReader::new(&mut *ctx.stdin)
                .read_line(&mut line)
                .map_err(|e| Failure::Usage(format!("reading proof from stdin: {e}")))?;
            line.trim_end_matches(['\r', '\n']).to_string()
        }
    };
    if proof.is_empty() {
        return Err(Failure::Usage(
            "no proof given: pass --proof or write it to stdin".into(),
        ));
    }
    let path = ctx
        .cfg
        .config_path
        .clone()
        .ok_or_else(|| Failure::Usage("no config file location: pass --config or set HOME".into()))?;
    let mut body = json!({"issuer": a.issuer, "subject": a.subject, "proof": proof});
    let who = format!("{}:{}", a.issuer, a.subject);
    if !a.scopes.is_empty() {
        body["scopes"] = json!(a.scopes);
    }
    let token = ctx.client.post("/v1/auth/token", &body)?;
    let mut file = FileConfig::load(&path).map_err(Failure::Usage)?;
    file.token = Some(str_field(&token, "value")?);
    file.save(&path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let summary = json!({
        "login": who,
        "identity": token["subject"],
        "scopes": token["scopes"],
        "expiry": token["expiry"],
        "config": path.display().to_string(),
    });
    ctx.emit(&summary, |v| {
        format!(
            "logged in as {} until {}; token saved to {}",
            v["login"].as_str().unwrap_or("?"),
            v["expiry"].as_str().unwrap_or("?"),
            v["config"].as_str().unwrap_or("?")
        )
    });
    Ok(())
}

fn register(ctx: &mut Ctx<'_>, identifier: &str, parent: Option<&str>, wait: &WaitArgs) -> Outcome {
    let mut body = json!({"identifier": identifier});
    if let Some(p) = parent {
        body["parent"] = json!(ctx.node_id(p)?);
    }
    let job = ctx.client.post("/v1/dataset/register", &body)?;
    let id = str_field(&job, "id")?;
    if wait.no_wait {
        ctx.emit(&job, render_job);
        return Ok(());
    }
    ctx.note(format!("job {id}"));
    let done = ctx.wait_job(&id, Duration::from_secs(wait.timeout))?;
    ctx.emit(&done, |v| {
        let r = &v["result"];
        format!(
            "registered {} as folder {} ({} folders, {} items, {} bytes)",
            r["identifier"].as_str().unwrap_or(identifier),
            r["folder"].as_str().unwrap_or("?"),
            r["folders"],
            r["items"],
            r["total_size"]
        )
    });
    Ok(())
}

fn tale(ctx: &mut Ctx<'_>, cmd: TaleCmd) -> Outcome {
    match cmd {
        TaleCmd::Create {
            image,
            folder,
            title,
            authors,
            description,
            licenses,
        } => {
            let folder = ctx.node_id(&folder)?;
            let mut body = json!({
                "image_id": image,
                "folder_id": folder,
                "metadata": {"title": title, "authors": authors, "description": description},
            });
            if let Some(l) = licenses {
                body["metadata"]["licenses"] = json!({"environment": l[0], "data": l[1], "scripts": l[2]});
            }
            let t = ctx.client.post("/v1/tale", &body)?;
            ctx.emit(&t, render_tale);
        }
        TaleCmd::Export { id } => {
            // The manifest is already one canonical JSON document.
            let text = ctx.client.get_text(&format!("/v1/tale/{id}/export"), &[])?;
            let _ = writeln!(ctx.out, "{}", text.trim_end());
        }
        TaleCmd::Import { file } => {
            let mut text = String::new();
            if file == "-" {
                ctx.stdin
                    .read_to_string(&mut text)
                    .map_err(|e| Failure::Usage(format!("reading stdin: {e}")))?;
            } else {
                text = std::fs::read_to_string(&file).map_err(|e| Failure::Usage(format!("{file}: {e}")))?;
            }
            let manifest = parse_json(&text, "manifest")?;
            let t = ctx.client.post("/v1/tale/import", &manifest)?;
            ctx.emit(&t, render_tale);
        }
        TaleCmd::Publish { id, identifier } => {
            let body = match identifier {
                Some(i) => json!({"identifier": i}),
                None => json!({}),
            };
            let t = ctx.client.post(&format!("/v1/tale/{id}/publish"), &body)?;
            ctx.emit(&t, render_tale);
        }
    }
    Ok(())
}

fn instance(ctx: &mut Ctx<'_>, cmd: InstanceCmd) -> Outcome {
    let inst = match cmd {
        InstanceCmd::Launch { tale } => ctx.client.post("/v1/instance", &json!({"tale_id": tale}))?,
        InstanceCmd::Suspend { id } => ctx.client.post(&format!("/v1/instance/{id}/suspend"), &json!({}))?,
        InstanceCmd::Resume { id } => ctx.client.post(&format!("/v1/instance/{id}/resume"), &json!({}))?,
        InstanceCmd::Rm { id } => {
            ctx.client.delete(&format!("/v1/instance/{id}"))?;
            ctx.emit(&json!({"id": id, "deleted": true}), |_| {
                format!("instance {id} deleted")
            });
            return Ok(());
        }
        InstanceCmd::Status { id: Some(id) } => {
            let i = ctx.client.get(&format!("/v1/instance/{id}"))?;
            ctx.emit(&i, |v| {
                let mut text = render_instance(v);
                for step in v["audit"].as_array().into_iter().flatten() {
                    text.push_str(&format!(
                        "\n  {} {} {}",
                        step["index"],
                        step["name"].as_str().unwrap_or("?"),
                        step["outcome"].as_str().unwrap_or("?")
                    ));
                }
                text
            });
            return Ok(());
        }
        InstanceCmd::Status { id: None } => {
            let all = ctx.client.get("/v1/instance")?;
            ctx.emit(&all, |v| {
                v.as_array()
                    .into_iter()
                    .flatten()
                    .map(render_instance)
                    .collect::<Vec<_>>()
                    .join("\n")
            });
            return Ok(());
        }
    };
    ctx.emit(&inst, render_instance);
    Ok(())
}

fn join(v: &Value) -> String {
    v.as_array()
        .into_iter()
        .flatten()
        .filter_map(Value::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_listing(v: &Value) -> String {
    let mut lines = vec![v["path"].as_str().unwrap_or("/").to_string()];
    for c in v["children"].as_array().into_iter().flatten() {
        lines.push(format!(
            "  {:<10} {}  {}",
            c["kind"].as_str().unwrap_or("?").to_lowercase(),
            c["name"].as_str().unwrap_or("?"),
            c["id"].as_str().unwrap_or("?")
        ));
    }
    for f in v["files"].as_array().into_iter().flatten() {
        lines.push(format!(
            "  {:<10} {}  {} bytes  {}",
            "file",
            f["provenance"]["original_name"].as_str().unwrap_or("?"),
            f["size"],
            f["provenance"]["source_url"].as_str().unwrap_or("?")
        ));
    }
    lines.join("\n")
}

fn render_job(v: &Value) -> String {
    let mut text = format!(
        "job {} {} {}%",
        v["id"].as_str().unwrap_or("?"),
        v["status"].as_str().unwrap_or("?"),
        v["progress"]
    );
    if let Some(m) = v["error"]["message"].as_str() {
        text.push_str(&format!(": {m}"));
    }
    text
}

fn render_tale(v: &Value) -> String {
    format!(
        "tale {} {:?} image {}",
        v["id"].as_str().unwrap_or("?"),
        v["metadata"]["title"].as_str().unwrap_or(""),
        v["image_id"].as_str().unwrap_or("?")
    )
}

fn render_instance(v: &Value) -> String {
    format!(
        "instance {} {} {}",
        v["id"].as_str().unwrap_or("?"),
        v["state"].as_str().unwrap_or("?"),
        v["route_path"].as_str().unwrap_or("-")
    )
}
