//! Caption templates for the two generation paths, rendered for one object
//! and answered by a canned completer.
//!
//! Pass a program as the first argument to send the instruction to it on
//! stdin instead, e.g. `cargo run --example prompt_templates -- cat`.

use syncd::datagen::{
    CannedCompleter, CommandCompleter, PromptTemplate, TemplateKind, TextCompleter,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let completer: Box<dyn TextCompleter> = match std::env::args().nth(1) {
        Some(program) => Box::new(CommandCompleter {
            program,
            args: Vec::new(),
        }),
        None => Box::new(CannedCompleter {
            responses: vec![
                (
                    "description of the background".into(),
                    "1. on a cluttered workbench\n2. beside a rainy window\n3. in a pine forest"
                        .into(),
                ),
                (
                    "subspecies".into(),
                    "1. a fluffy orange tabby cat\n2. a sleek black cat with green eyes".into(),
                ),
            ],
        }),
    };

    let jobs = [
        (TemplateKind::RigidBackground, "a small red toy tractor"),
        (TemplateKind::DeformableDescription, "cat"),
        (TemplateKind::DeformableBackground, "cat"),
    ];
    for (kind, subject) in jobs {
        let template = PromptTemplate::standard(kind);
        println!("== {kind:?} (slots: {})", template.slots().join(", "));
        let instruction = template.render(&template.standard_slots(subject))?;
        let head: String = instruction.lines().take(2).collect::<Vec<_>>().join("\n");
        println!("{head}\n...");
        for caption in completer.complete(&instruction)? {
            println!("  -> {subject}, {caption}");
        }
    }
    Ok(())
}
