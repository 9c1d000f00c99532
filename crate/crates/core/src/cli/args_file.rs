use std::ffi::OsString;
use std::path::Path;

/// Parses `key = value` lines into long flags. Blank lines and `#` comments are skipped.
///
/// `true` and `false` toggle switches: `true` emits the bare flag, `false` emits nothing.
pub fn parse_args_file(text: &str, origin: &Path) -> Result<Vec<OsString>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{}: expected `key = value`, got {line:?}", origin.display(), n + 1));
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) || key.starts_with('-') {
            return Err(format!("{}:{}: invalid key {key:?}", origin.display(), n + 1));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Number of leading argv entries naming the program and (sub)subcommand.
fn command_prefix_len(argv: &[OsString]) -> usize {
    let is_word = |i: usize| argv.get(i).is_some_and(|a| !a.to_string_lossy().starts_with('-'));
    match argv.get(1).map(|a| a.to_string_lossy().into_owned()) {
        Some(cmd) if cmd == "analyze" && is_word(2) => 3,
        Some(_) if is_word(1) => 2,
        _ => 1,
    }
}

/// Replaces `--config FILE` with the file's flags, placed before every
/// command-line flag so later command-line values win.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut file = None;
    let mut iter = argv.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy().into_owned();
        if s == "--config" {
            match iter.next() {
                Some(p) => file = Some(p),
                None => return Err("--config needs a file path".into()),
            }
        } else if let Some(p) = s.strip_prefix("--config=") {
            file = Some(p.into());
        } else {
            rest.push(arg);
        }
    }
    let Some(file) = file else {
        return Ok(rest);
    };
    let path = Path::new(&file);
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let flags = parse_args_file(&text, path)?;
    let at = command_prefix_len(&rest);
    rest.splice(at..at, flags);
    Ok(rest)
}
