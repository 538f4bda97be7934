#include <doctest.h>

#include <filesystem>
#include <string>
#include <vector>

#include "kilab/errors.hpp"
#include "kilab/tokenizer.hpp"

using namespace kilab;

TEST_SUITE("tokenizer") {

TEST_CASE("count then lexicographic order") {
  const std::vector<std::string> texts{"a b a"};
  const auto v = Vocabulary::build(texts, 1000, 1);
  CHECK(v.size() == 106);
  CHECK(v.id_of("a") == 104);
  CHECK(v.id_of("b") == 105);
  const auto again = Vocabulary::build(texts, 1000, 1);
  CHECK(again == v);

  const std::vector<std::string> tie{"z y x y"};
  const auto t = Vocabulary::build(tie, 1000, 1);
  CHECK(t.token_of(104) == "y");
  CHECK(t.token_of(105) == "x");
  CHECK(t.token_of(106) == "z");
}

TEST_CASE("special block") {
  const Vocabulary v;
  CHECK(v.size() == 104);
  CHECK(v.token_of(special::pad) == "<pad>");
  CHECK(v.token_of(special::eos) == "<eos>");
  for (int k = 0; k < 100; ++k) {
    CHECK(Vocabulary::sentinel(k) == 4 + k);
    CHECK(Vocabulary::is_sentinel(Vocabulary::sentinel(k)));
  }
  CHECK_FALSE(Vocabulary::is_sentinel(special::eos));
  CHECK_FALSE(Vocabulary::is_sentinel(special::first_regular));
  CHECK_THROWS_AS(Vocabulary::sentinel(100), IdError);
  CHECK(Vocabulary::build({}, 200, 1).size() == 104);
}

TEST_CASE("limits") {
  const std::vector<std::string> texts{"a a a b b c"};
  CHECK(Vocabulary::build(texts, 1000, 2).size() == 106);
  CHECK(Vocabulary::build(texts, 105, 1).size() == 105);
  CHECK_THROWS_AS(Vocabulary::build(texts, 104, 1), ConfigError);
}

TEST_CASE("punctuation is isolated") {
  CHECK(split_words("Witcher, fantasy") == std::vector<std::string>{"Witcher", ",", "fantasy"});
  CHECK(split_words("  E1 (born 1983).\tok ") ==
        std::vector<std::string>{"E1", "(", "born", "1983", ")", ".", "ok"});
  CHECK(split_words("").empty());
  CHECK(canonical_text("who  is E1?") == "who is E1 ?");

  const std::vector<std::string> texts{"Witcher fantasy ,"};
  const auto v = Vocabulary::build(texts, 1000, 1);
  CHECK(v.encode("Witcher, fantasy") ==
        TokenIds{v.id_of("Witcher"), v.id_of(","), v.id_of("fantasy")});
}

TEST_CASE("unknowns and sentinels") {
  const std::vector<std::string> texts{"a b"};
  const auto v = Vocabulary::build(texts, 1000, 1);
  CHECK(v.encode("zzz") == TokenIds{special::unk});
  CHECK(v.encode("A") == TokenIds{special::unk});
  for (const auto id : v.encode("<sentinel_0> <eos> <pad>")) {
    CHECK_FALSE(Vocabulary::is_sentinel(id));
    CHECK(id != special::eos);
  }
  CHECK_THROWS_AS(v.decode(TokenIds{999}), IdError);
  CHECK_THROWS_AS(v.decode(TokenIds{-1}), IdError);
}

TEST_CASE("round trip") {
  const std::vector<std::string> texts{"The Witcher is a series of fantasy novels ."};
  const auto v = Vocabulary::build(texts, 1000, 1);
  const std::string t = "a series of The Witcher novels .";
  CHECK(v.decode(v.encode(t)) == t);
}

TEST_CASE("serialization") {
  const std::vector<std::string> texts{"x y z x"};
  const auto v = Vocabulary::build(texts, 1000, 1);
  const auto s = v.serialize();
  CHECK(s.rfind("specials 4 sentinels 100 size 107\n", 0) == 0);
  CHECK(Vocabulary::parse(s) == v);
  const auto path = std::filesystem::temp_directory_path() / "kilab_test_vocab.txt";
  v.save(path);
  CHECK(Vocabulary::load(path) == v);
  CHECK_THROWS(Vocabulary::parse("garbage\n"));
}

}
