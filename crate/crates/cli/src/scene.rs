use std::fs;
use std::path::Path;

use qfnlos::{SceneSurfels, Surfel};

use crate::error::CliError;

/// Parses `x y z albedo` lines; `#` starts a comment.
pub fn parse_scene(text: &str, path: &Path) -> Result<SceneSurfels, CliError> {
    let mut surfels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fail = |reason: String| CliError::Scene {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(fail(format!("expected `x y z albedo`, got {} fields", fields.len())));
        }
        let mut v = [0.0; 4];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field.parse().map_err(|_| fail(format!("`{field}` is not a number")))?;
        }
        let surfel = Surfel::new([v[0], v[1], v[2]], v[3]).map_err(|e| fail(e.to_string()))?;
        surfels.push(surfel);
    }
    Ok(SceneSurfels::new(surfels))
}

pub fn load_scene(path: &Path) -> Result<SceneSurfels, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scene(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_surfels_and_skips_comments() {
        let scene = parse_scene("# scene\n0 0 1 1\n\n0.1 -0.2 0.5 0.3 # side\n", Path::new("s")).unwrap();
        assert_eq!(scene.len(), 2);
        assert_eq!(scene.surfels()[1].position(), [0.1, -0.2, 0.5]);
    }

    #[test]
    fn empty_file_is_an_empty_scene() {
        assert_eq!(parse_scene("", Path::new("s")).unwrap().len(), 0);
    }

    #[test]
    fn malformed_number_reports_line() {
        let err = parse_scene("0 0 1 1\n1 2 three 4\n", Path::new("scene.txt")).unwrap_err();
        assert_eq!(err.to_string(), "scene.txt:2: `three` is not a number");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn wrong_field_count_and_bad_depth_report_line() {
        let err = parse_scene("0 0 1\n", Path::new("s")).unwrap_err();
        assert!(err.to_string().starts_with("s:1:"));
        let err = parse_scene("0 0 1 1\n0 0 -1 1\n", Path::new("s")).unwrap_err();
        assert!(err.to_string().starts_with("s:2:"), "{err}");
    }
}
