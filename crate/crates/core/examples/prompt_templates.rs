//! List the shipped prompt templates with their placeholders and render one.

use agentic_search::agent::templates::{ALL, VERIFY};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for t in ALL {
        let slots: Vec<&str> = t.required_placeholders().into_iter().collect();
        println!("{:<20} {:>5} chars  {{{}}}", t.name, t.body().len(), slots.join("}, {"));
    }

    let rendered = VERIFY.render(&[
        ("query", "Are the Laleli Mosque and Esma Sultan Mansion located in the same neighborhood?"),
        ("context_data", "1. Laleli Mosque -> Laleli\n2. Esma Sultan Mansion -> Ortakoy"),
        ("model_response", "They are in different neighborhoods, so the answer is No."),
    ]);
    println!("\n{}", rendered?);

    // a missing value is reported rather than left in the prompt
    println!("\n{}", VERIFY.render(&[("query", "q")]).unwrap_err());
    Ok(())
}
