//! Generation of the POSIX shell job wrapper.
//!
//! The wrapper is the only thing a backend runs. Invoked as
//! `sh __wrapper__.sh <workdir>`, it:
//!
//! 1. changes into `<workdir>` and copies the staged input files there,
//! 2. exports the application environment,
//! 3. appends a `started` event to the `__events__` spool,
//! 4. runs the command line with stdout and stderr redirected to the files
//!    `stdout` and `stderr`, emitting `heartbeat` and `output_line` events
//!    from a side loop while it runs,
//! 5. writes the exit code to `__exitcode__` (ASCII integer and newline),
//! 6. appends a `completed` event.
//!
//! Spool lines are `<iso8601>\t<kind>\t<payload>`. For `output_line` the
//! payload is the raw output line, otherwise space separated `key=value`
//! pairs.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plugins::ConfiguredApplication;

pub const WRAPPER_FILE: &str = "__wrapper__.sh";
pub const EXIT_CODE_FILE: &str = "__exitcode__";
pub const EVENTS_FILE: &str = "__events__";
pub const STDOUT_FILE: &str = "stdout";
pub const STDERR_FILE: &str = "stderr";

/// Granularity of the wrapper's side loop.
const TICK_MS: u64 = 50;

/// Wrapper-side monitoring settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Interval between heartbeat events; 0 disables them.
    pub heartbeat_ms: u64,
    /// Forward each new stdout line as an `output_line` event.
    pub forward_output: bool,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            heartbeat_ms: 1000,
            forward_output: true,
        }
    }
}

pub fn shell_quote(s: &str) -> String {
    if !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "/._-+=:,@%".contains(c))
    {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn valid_env_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Renders the wrapper script text.
pub fn render_wrapper(
    configured: &ConfiguredApplication,
    input_files: &[PathBuf],
    job_label: &str,
    sensor: &SensorConfig,
) -> Result<String> {
    if configured.command_line.is_empty() {
        return Err(Error::ConfigError("empty command line".into()));
    }
    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    s.push_str(&format!("# job wrapper for job {job_label}\n"));
    s.push_str("WORKDIR=\"${1:?usage: wrapper WORKDIR}\"\n");
    s.push_str("mkdir -p \"$WORKDIR\" && cd \"$WORKDIR\" || exit 111\n");
    s.push_str(&format!("EVENTS={EVENTS_FILE}\n"));
    s.push_str(
        "emit() {\n  kind=$1; shift\n  printf '%s\\t%s\\t%s\\n' \"$(date -u +%Y-%m-%dT%H:%M:%SZ)\" \"$kind\" \"$*\" >> \"$EVENTS\"\n}\n",
    );
    s.push_str(&format!(
        "finish() {{\n  printf '%s\\n' \"$1\" > {EXIT_CODE_FILE}.tmp && mv {EXIT_CODE_FILE}.tmp {EXIT_CODE_FILE}\n  emit completed \"exit_code=$1\"\n  exit 0\n}}\n"
    ));
    for f in input_files {
        s.push_str(&format!(
            "cp {} . || finish 112\n",
            shell_quote(&f.to_string_lossy())
        ));
    }
    for (k, v) in &configured.environment {
        if !valid_env_name(k) {
            return Err(Error::ConfigError(format!("invalid environment variable name `{k}`")));
        }
        s.push_str(&format!("export {k}={}\n", shell_quote(v)));
    }
    s.push_str("emit started \"host=$(uname -n 2>/dev/null)\"\n");

    let heartbeat_ticks = if sensor.heartbeat_ms == 0 {
        0
    } else {
        (sensor.heartbeat_ms / TICK_MS).max(1)
    };
    let side_loop = heartbeat_ticks > 0 || sensor.forward_output;
    if side_loop {
        s.push_str("rm -f __done__\n");
        s.push_str("(\n  sent=0\n  ticks=0\n");
        s.push_str("  forward() {\n");
        if sensor.forward_output {
            s.push_str(&format!(
                "    total=$(wc -l < {STDOUT_FILE} 2>/dev/null || echo 0)\n    total=$((total + 0))\n    if [ \"$total\" -gt \"$sent\" ]; then\n      sed -n \"$((sent + 1)),${{total}}p\" {STDOUT_FILE} | while IFS= read -r line; do emit output_line \"$line\"; done\n      sent=$total\n    fi\n"
            ));
        } else {
            s.push_str("    :\n");
        }
        s.push_str("  }\n");
        s.push_str("  while :; do\n    if [ -f __done__ ]; then forward; break; fi\n");
        s.push_str(&format!(
            "    sleep {}\n    ticks=$((ticks + 1))\n",
            TICK_MS as f64 / 1000.0
        ));
        if heartbeat_ticks > 0 {
            s.push_str(&format!(
                "    if [ $((ticks % {heartbeat_ticks})) -eq 0 ]; then forward; emit heartbeat \"elapsed_ms=$((ticks * {TICK_MS}))\"; fi\n"
            ));
        } else {
            s.push_str("    forward\n");
        }
        s.push_str("  done\n) &\nsideloop=$!\n");
    }

    let cmd: Vec<String> = configured.command_line.iter().map(|a| shell_quote(a)).collect();
    s.push_str(&format!(
        "( exec {} ) > {STDOUT_FILE} 2> {STDERR_FILE} < /dev/null\ncode=$?\n",
        cmd.join(" ")
    ));
    if side_loop {
        s.push_str("touch __done__\nwait \"$sideloop\"\n");
    }
    s.push_str("finish \"$code\"\n");
    Ok(s)
}

/// Writes the wrapper for a job into `input_dir` and makes it executable.
pub fn generate_wrapper(
    configured: &ConfiguredApplication,
    input_files: &[PathBuf],
    job_label: &str,
    sensor: &SensorConfig,
    input_dir: &Path,
) -> Result<PathBuf> {
    if !input_dir.is_dir() {
        return Err(Error::WorkspaceMissing(input_dir.to_path_buf()));
    }
    let text = render_wrapper(configured, input_files, job_label, sensor)?;
    let path = input_dir.join(WRAPPER_FILE);
    fs::write(&path, text)?;
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755))?;
    Ok(path)
}
