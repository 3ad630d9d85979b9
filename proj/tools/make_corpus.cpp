#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "define/corpus.hpp"
#include "textgen.hpp"

// Writes a deterministic synthetic corpus for experiments and the
// acceptance runs.

int main(int argc, char** argv) {
  CLI::App app{"generate a deterministic synthetic word-level corpus"};
  std::string out;
  textgen::CorpusSpec spec;
  app.add_option("--out", out, "output file")->required();
  app.add_option("--bytes", spec.target_bytes, "approximate size (default 1 MiB)");
  app.add_option("--seed", spec.seed, "language seed (default 1)");
  app.add_option("--sample-seed", spec.sample_seed,
                 "stream seed; same language, different text (default 1)");
  app.add_option("--types", spec.word_types, "distinct word types (default 6000)");
  CLI11_PARSE(app, argc, argv);

  const std::string text = textgen::generate(spec);
  define::write_text_file(out, text);
  define::Vocab vocab = define::Vocab::build(text, 1);
  std::cout << "wrote " << out << " (" << text.size() << " bytes, vocab "
            << vocab.size() << ")\n";
  return 0;
}
