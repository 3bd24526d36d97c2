#!/usr/bin/env python3
"""Regenerate crates/core/data/contrastive_sample.jsonl.

Template-generated, scenario-matched contrastive pairs: each pair shares the
scenario sentence and differs only in the stance clause.
"""
import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent
TAXONOMY = ROOT / "crates/core/data/taxonomy.json"
OUT = ROOT / "crates/core/data/contrastive_sample.jsonl"

SCENARIOS = [
    "A neighbor asks for help moving a heavy sofa on a rainy evening.",
    "A manager must decide how to handle a late project at work.",
    "A student finds a wallet full of cash in the school library.",
    "A village council debates whether to build a new dam.",
    "A doctor has one dose of medicine and two sick patients.",
    "A teenager is invited to a party the night before an exam.",
    "A shop owner notices a customer struggling to pay for food.",
    "A journalist receives a leaked document about a local company.",
    "A family plans how to spend an unexpected inheritance.",
    "A traveler is offered a shortcut through private farmland.",
    "A team captain picks players for the final match.",
    "A programmer discovers a bug that nobody else has noticed.",
]

# value id -> ((positive stance, negative stance), ...)
STANCES = {
    "self_direction": [("They choose their own path and think independently.", "They simply do whatever others tell them to do."),
                       ("They decide freely and explore new ideas.", "They avoid deciding and follow orders blindly.")],
    "stimulation": [("They seek excitement and welcome a bold new challenge.", "They avoid anything new and prefer dull routine."),
                    ("They are thrilled by the adventure of it.", "They are bored and want nothing unusual.")],
    "hedonism": [("They focus on enjoying the pleasure of the moment.", "They deny themselves any pleasure at all."),
                 ("They treat themselves to something delightful.", "They refuse every comfort and enjoyment.")],
    "achievement": [("They work hard to succeed and prove their competence.", "They do not care about succeeding at all."),
                    ("They aim to excel and earn recognition.", "They give up on doing the task well.")],
    "power": [("They take control and assert authority over others.", "They give away control and claim no authority."),
              ("They use the situation to gain status and dominance.", "They step aside and seek no influence.")],
    "security": [("They make sure everyone stays safe and stable.", "They ignore the risks and let things become unsafe."),
                 ("They protect the order and safety of the group.", "They gamble with everyone's safety.")],
    "conformity": [("They follow the rules and respect social norms.", "They break the rules and defy social norms."),
                   ("They restrain themselves so as not to upset others.", "They act on impulse whatever others think.")],
    "tradition": [("They honor the customs handed down by their elders.", "They dismiss the old customs as useless."),
                  ("They keep the traditional way of doing things.", "They abandon tradition without a second thought.")],
    "benevolence": [("They help with kindness and care for the people involved.", "They ignore the people involved and offer no care."),
                    ("They act with compassion toward those close to them.", "They act with indifference toward those close to them.")],
    "universalism": [("They protect the welfare of all people and nature.", "They disregard outsiders and the environment."),
                     ("They show tolerance and concern for everyone.", "They show contempt for people unlike them.")],
    "power_distance": [("They defer to those of higher rank without question.", "They treat everyone as equals regardless of rank."),
                       ("They accept that the boss decides for everyone.", "They insist that the boss has no special say.")],
    "uncertainty_avoidance": [("They insist on clear rules to avoid any ambiguity.", "They are comfortable improvising without rules."),
                              ("They plan every detail to remove uncertainty.", "They happily leave everything uncertain.")],
    "individualism": [("They look after their own interests first.", "They put the group before their own interests."),
                      ("They rely on themselves and act alone.", "They rely on the community and act together.")],
    "masculinity": [("They compete assertively to win and be rewarded.", "They cooperate modestly and avoid competing."),
                    ("They push hard to come out on top.", "They value caring more than winning.")],
    "long_term_orientation": [("They save and persevere for future rewards.", "They spend now and ignore the future."),
                              ("They plan patiently for the years ahead.", "They care only about today.")],
    "indulgence": [("They relax and freely enjoy life.", "They restrain every desire with strict discipline."),
                   ("They have fun and follow their desires.", "They suppress their wishes and stay strict.")],
    "commonsense_morality": [("They do what any decent person would see as right.", "They do what any decent person would see as wrong."),
                             ("They act in the plainly moral way.", "They act in a plainly immoral way.")],
    "deontology": [("They keep their duty and the rule no matter the outcome.", "They break their duty whenever the outcome suits them."),
                   ("They keep the promise because it is their obligation.", "They break the promise because it is convenient.")],
    "utilitarianism": [("They choose what brings the most good to the most people.", "They choose what benefits only a few at great cost."),
                       ("They weigh the outcomes to maximize overall wellbeing.", "They ignore the outcomes for overall wellbeing.")],
    "justice": [("They treat everyone impartially and give each what is deserved.", "They play favorites and give people what they do not deserve."),
                ("They uphold the law and fair procedure.", "They bend the law for personal gain.")],
    "virtue_ethics": [("They act with courage and honesty as a good person would.", "They act with cowardice and deceit as a bad person would."),
                      ("They show integrity and good character.", "They show vice and poor character.")],
    "ubuntu": [("They act from shared humanity and care for the community.", "They act alone with no regard for the community."),
               ("They see their wellbeing as bound up with others.", "They see others as irrelevant to them.")],
    "confucianism": [("They respect their elders and keep harmony in their roles.", "They disrespect their elders and disrupt harmony."),
                     ("They fulfill their duties to family with filial piety.", "They neglect their duties to family.")],
    "fairness": [("They treat everyone equally without bias.", "They discriminate and treat people unequally."),
                 ("They share fairly among all involved.", "They keep an unfair share for themselves.")],
    "truthfulness": [("They tell the whole truth honestly.", "They lie and deceive the others."),
                     ("They report the facts accurately.", "They spread a false story.")],
    "toxicity": [("They speak politely and respectfully to everyone.", "They insult everyone with hateful words."),
                 ("They stay courteous even when annoyed.", "They lash out with rude abuse.")],
    "harmfulness": [("They avoid causing any harm to anyone.", "They cause harm without hesitation."),
                    ("They keep everyone out of danger.", "They put people in danger on purpose.")],
    "face": [("They protect everyone's dignity and avoid public shame.", "They humiliate people in public."),
             ("They save face for themselves and others.", "They cause others to lose face.")],
    "karma": [("They act well, knowing good deeds return to them.", "They act badly, ignoring that deeds come back around."),
              ("They sow kindness so that kindness returns.", "They sow harm without thought of consequence.")],
    "honor": [("They defend their family's good name with integrity.", "They disgrace their family's good name."),
              ("They keep their word to protect their honor.", "They betray their word and lose their honor.")],
    "spirituality": [("They pray and seek a sacred meaning in it.", "They see nothing sacred or meaningful in it."),
                     ("They feel connected to something divine.", "They reject anything beyond the material.")],
}


def main() -> None:
    taxonomy = json.loads(TAXONOMY.read_text())
    ids = [v["id"] for v in taxonomy["values"]]
    assert set(ids) == set(STANCES), set(ids) ^ set(STANCES)
    lines = []
    for vid in ids:
        for i, scenario in enumerate(SCENARIOS):
            pos, neg = STANCES[vid][i % len(STANCES[vid])]
            lines.append(json.dumps({
                "value_id": vid,
                "scenario_id": f"s{i:02d}",
                "positive": f"{scenario} {pos}",
                "negative": f"{scenario} {neg}",
            }))
    OUT.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
