use std::path::{Path, PathBuf};

use super::{Template, Verbalizer};
use crate::error::{Error, Result};
use crate::textdata::TaskSpec;

/// Parsed prompt file: `@TEMPLATE`, `@VERBALIZER` and optional `@INSTRUCTION`
/// sections. Verbalizer lines read `label=text`, where label is a label
/// name or index. Lines starting with `#` outside the template are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptResource {
    pub template: Template,
    pub verbalizer: Verbalizer,
    pub instruction: Option<String>,
}

impl PromptResource {
    pub fn parse(text: &str, task: &TaskSpec) -> Result<Self> {
        let mut template: Option<String> = None;
        let mut verbal: Option<Vec<String>> = None;
        let mut instruction: Option<String> = None;
        let mut current: Option<(String, Vec<&str>)> = None;

        let mut flush = |sec: Option<(String, Vec<&str>)>| -> Result<()> {
            let Some((name, lines)) = sec else { return Ok(()) };
            let body = lines.join("\n").trim_matches('\n').to_owned();
            match name.as_str() {
                "TEMPLATE" => template = Some(body),
                "INSTRUCTION" => instruction = Some(body),
                "VERBALIZER" => verbal = Some(lines.iter().map(|l| (*l).to_owned()).collect()),
                other => return Err(Error::config(format!("unknown prompt section @{other}"))),
            }
            Ok(())
        };

        for line in text.lines() {
            if let Some(name) = line.strip_prefix('@') {
                flush(current.take())?;
                current = Some((name.trim().to_uppercase(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            } else if !line.trim().is_empty() && !line.starts_with('#') {
                return Err(Error::config(format!("text outside any section: {line:?}")));
            }
        }
        flush(current.take())?;

        let template = Template::new(&template.ok_or_else(|| Error::config("prompt file has no @TEMPLATE"))?)?;
        let lines = verbal.ok_or_else(|| Error::config("prompt file has no @VERBALIZER"))?;
        let mut slots: Vec<Option<String>> = vec![None; task.num_classes()];
        for line in lines.iter().map(|l| l.trim()).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("verbalizer line without '=': {line:?}")))?;
            let key = key.trim();
            let idx = key
                .parse::<usize>()
                .ok()
                .filter(|i| *i < slots.len())
                .or_else(|| task.label_index(key))
                .ok_or_else(|| Error::config(format!("unknown label {key:?} for task {}", task.task_id)))?;
            if slots[idx].replace(value.trim().to_owned()).is_some() {
                return Err(Error::config(format!("label {key:?} verbalized twice")));
            }
        }
        let labels = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::config(format!("label {} has no verbalizer entry", task.label_names[i]))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            template,
            verbalizer: Verbalizer::new(labels)?,
            instruction: instruction.filter(|s| !s.trim().is_empty()),
        })
    }
}

const BUILTIN: &[(&str, &str)] = &[
    ("task1.en.prompt", include_str!("../../resources/prompts/task1.en.prompt")),
    ("task1.sw.prompt", include_str!("../../resources/prompts/task1.sw.prompt")),
    ("task2.en.prompt", include_str!("../../resources/prompts/task2.en.prompt")),
    ("task2.sw.prompt", include_str!("../../resources/prompts/task2.sw.prompt")),
    ("task3.en.prompt", include_str!("../../resources/prompts/task3.en.prompt")),
    ("task3.sw.prompt", include_str!("../../resources/prompts/task3.sw.prompt")),
    ("task4.en.prompt", include_str!("../../resources/prompts/task4.en.prompt")),
    ("task4.sw.prompt", include_str!("../../resources/prompts/task4.sw.prompt")),
];

/// Where prompt files come from: a directory of `task{n}.{lang}.prompt`
/// files, or the copies compiled into the binary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PromptLibrary {
    #[default]
    Builtin,
    Dir(PathBuf),
}

impl PromptLibrary {
    pub fn dir(path: impl Into<PathBuf>) -> Self {
        Self::Dir(path.into())
    }

    pub fn file_name(task: &TaskSpec, language: &str) -> String {
        format!("task{}.{language}.prompt", task.task_id)
    }

    pub fn raw(&self, task: &TaskSpec, language: &str) -> Result<String> {
        let name = Self::file_name(task, language);
        match self {
            PromptLibrary::Builtin => BUILTIN
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| (*t).to_owned())
                .ok_or_else(|| Error::config(format!("no built-in prompt {name}"))),
            PromptLibrary::Dir(dir) => read(&dir.join(&name)),
        }
    }

    pub fn load(&self, task: &TaskSpec, language: &str) -> Result<PromptResource> {
        let text = self.raw(task, language)?;
        PromptResource::parse(&text, task).map_err(|e| Error::config(format!("{}: {e}", Self::file_name(task, language))))
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::config(format!("missing prompt resource {}: {e}", path.display())))
}
