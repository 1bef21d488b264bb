//! Denoisers run as external processes.
//!
//! The command template may use `{in}`, `{sigma}` and `{out}`. The input plane
//! is written as a single-plane container, the command runs through `sh -c`,
//! and the plane it writes to `{out}` is read back.

use std::fs;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use super::{check_plane, check_sigma, Denoiser};
use crate::container::{read_plane, write_plane};
use crate::error::{Error, Result};
use crate::image::Plane;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);

#[derive(Debug, Clone)]
pub struct ExternalDenoiser {
    template: String,
    timeout: Duration,
    concurrent: bool,
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

impl ExternalDenoiser {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        for key in ["{in}", "{out}"] {
            if !template.contains(key) {
                return Err(Error::InvalidInput(format!(
                    "external denoiser command must contain {key}"
                )));
            }
        }
        Ok(ExternalDenoiser {
            template,
            timeout: DEFAULT_TIMEOUT,
            concurrent: false,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Allows concurrent invocations (each call uses its own scratch directory).
    pub fn concurrent(mut self, yes: bool) -> Self {
        self.concurrent = yes;
        self
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    fn contract(&self, reason: String) -> Error {
        Error::DenoiserContract {
            name: self.name().to_string(),
            reason,
        }
    }

    fn run(&self, cmd: &str, stderr_path: &std::path::Path) -> Result<()> {
        let stderr = fs::File::create(stderr_path)?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(stderr)
            .spawn()
            .map_err(|e| self.contract(format!("cannot start command: {e}")))?;
        let start = Instant::now();
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() > self.timeout {
                let _ = child.kill();
                let _ = child.wait();
                return Err(self.contract(format!("timed out after {:?}", self.timeout)));
            }
            std::thread::sleep(Duration::from_millis(2));
        };
        if !status.success() {
            let msg = fs::read_to_string(stderr_path).unwrap_or_default();
            return Err(self.contract(format!("command failed ({status}): {}", msg.trim())));
        }
        Ok(())
    }
}

impl Denoiser for ExternalDenoiser {
    fn name(&self) -> &str {
        "external"
    }

    fn reentrant(&self) -> bool {
        self.concurrent
    }

    fn denoise(&self, img: &Plane, sigma: f64) -> Result<Plane> {
        check_sigma(sigma)?;
        check_plane(img)?;
        let dir = tempfile::tempdir()?;
        let input = dir.path().join("in.mulg");
        let output = dir.path().join("out.mulg");
        write_plane(&input, img)?;
        let cmd = self
            .template
            .replace("{in}", &shell_quote(&input.to_string_lossy()))
            .replace("{out}", &shell_quote(&output.to_string_lossy()))
            .replace("{sigma}", &format!("{sigma}"));
        self.run(&cmd, &dir.path().join("stderr.txt"))?;
        let out =
            read_plane(&output).map_err(|e| self.contract(format!("unreadable output: {e}")))?;
        if !out.same_shape(img) {
            return Err(self.contract(format!(
                "returned {}x{} for a {}x{} input",
                out.width(),
                out.height(),
                img.width(),
                img.height()
            )));
        }
        if !out.is_finite() {
            return Err(self.contract("non-finite output".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{bounded_denoiser_audit, AUDIT_SIGMAS};

    fn plane() -> Plane {
        Plane::from_fn(9, 7, |x, y| (x as f64 * 0.7).sin() + y as f64)
    }

    #[test]
    fn copy_command_is_identity() {
        let d = ExternalDenoiser::new("cp {in} {out}").unwrap();
        let p = plane();
        assert_eq!(d.denoise(&p, 0.5).unwrap(), p);
        let audit = bounded_denoiser_audit(&d, &AUDIT_SIGMAS, 16, 1).unwrap();
        assert_eq!(audit.constant, 0.0);
    }

    #[test]
    fn sigma_is_passed_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("sigma.txt");
        let d = ExternalDenoiser::new(format!(
            "echo {{sigma}} > '{}'; cp {{in}} {{out}}",
            log.display()
        ))
        .unwrap();
        let s = 1.0 / 3.0;
        d.denoise(&plane(), s).unwrap();
        let written: f64 = fs::read_to_string(&log).unwrap().trim().parse().unwrap();
        assert_eq!(written.to_bits(), s.to_bits());
    }

    #[test]
    fn failures_are_contract_errors() {
        let p = plane();
        let dir = tempfile::tempdir().unwrap();
        let other = dir.path().join("other.mulg");
        write_plane(&other, &Plane::filled(3, 3, 1.0)).unwrap();
        let cases = [
            "exit 3; cp {in} {out}".to_string(),
            "head -c 30 {in} > {out}".to_string(),
            format!("cp '{}' {{out}}; true {{in}}", other.display()),
            "true {in} {out}".to_string(),
        ];
        for cmd in cases {
            let d = ExternalDenoiser::new(cmd.clone()).unwrap();
            match d.denoise(&p, 1.0) {
                Err(Error::DenoiserContract { .. }) => {}
                other => panic!("{cmd}: {other:?}"),
            }
        }
    }

    #[test]
    fn timeout_is_enforced() {
        let d = ExternalDenoiser::new("sleep 5; cp {in} {out}")
            .unwrap()
            .with_timeout(Duration::from_millis(100));
        let start = Instant::now();
        assert!(matches!(
            d.denoise(&plane(), 1.0),
            Err(Error::DenoiserContract { .. })
        ));
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn template_needs_placeholders() {
        assert!(ExternalDenoiser::new("cat").is_err());
    }
}
