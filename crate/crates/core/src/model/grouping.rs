use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{AdSlot, Content, Modality};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingKind {
    Single,
    Modality,
    Content,
    PerSlot,
}

impl GroupingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupingKind::Single => "single",
            GroupingKind::Modality => "modality",
            GroupingKind::Content => "content",
            GroupingKind::PerSlot => "per-slot",
        }
    }
}

impl fmt::Display for GroupingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(GroupingKind::Single),
            "modality" => Ok(GroupingKind::Modality),
            "content" => Ok(GroupingKind::Content),
            "per-slot" => Ok(GroupingKind::PerSlot),
            _ => Err(invalid(format!("unknown task grouping `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub slots: Vec<AdSlot>,
}

/// Ordered partition of the seven slots into prediction tasks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGrouping", into = "RawGrouping")]
pub struct TaskGrouping {
    kind: GroupingKind,
    tasks: Vec<Task>,
    slot_task: [usize; 7],
}

#[derive(Serialize, Deserialize)]
struct RawGrouping {
    kind: GroupingKind,
    tasks: Vec<Task>,
}

impl TryFrom<RawGrouping> for TaskGrouping {
    type Error = Error;

    fn try_from(raw: RawGrouping) -> Result<Self> {
        TaskGrouping::from_tasks(raw.kind, raw.tasks)
    }
}

impl From<TaskGrouping> for RawGrouping {
    fn from(g: TaskGrouping) -> Self {
        RawGrouping {
            kind: g.kind,
            tasks: g.tasks,
        }
    }
}

impl TaskGrouping {
    pub fn new(kind: GroupingKind) -> Self {
        let task = |name: &str, pred: &dyn Fn(AdSlot) -> bool| Task {
            name: name.to_string(),
            slots: AdSlot::ALL.into_iter().filter(|s| pred(*s)).collect(),
        };
        let tasks = match kind {
            GroupingKind::Single => vec![task("all", &|_| true)],
            GroupingKind::Modality => vec![
                task("audio", &|s| s.modality() == Modality::Audio),
                task("video", &|s| s.modality() == Modality::Video),
            ],
            GroupingKind::Content => vec![
                task("music", &|s| s.content() == Content::Music),
                task("podcast", &|s| s.content() == Content::Podcast),
            ],
            GroupingKind::PerSlot => AdSlot::ALL
                .into_iter()
                .map(|s| Task {
                    name: s.name().to_string(),
                    slots: vec![s],
                })
                .collect(),
        };
        Self::from_tasks(kind, tasks).expect("built-in groupings partition the slots")
    }

    /// Validates that `tasks` partition the slots exactly.
    pub fn from_tasks(kind: GroupingKind, tasks: Vec<Task>) -> Result<Self> {
        let mut slot_task = [usize::MAX; 7];
        for (t, task) in tasks.iter().enumerate() {
            for &s in &task.slots {
                if slot_task[s.index()] != usize::MAX {
                    return Err(invalid(format!("slot {s} appears in more than one task")));
                }
                slot_task[s.index()] = t;
            }
        }
        if let Some(missing) = AdSlot::ALL.into_iter().find(|s| slot_task[s.index()] == usize::MAX) {
            return Err(invalid(format!("slot {missing} is not covered by any task")));
        }
        Ok(Self { kind, tasks, slot_task })
    }

    pub fn kind(&self) -> GroupingKind {
        self.kind
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task_of(&self, slot: AdSlot) -> usize {
        self.slot_task[slot.index()]
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.name.as_str()).collect()
    }
}
