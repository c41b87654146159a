/**
 * Keyboard triage for the review queue: j/k walk the queue, a approves,
 * r rejects. Keys are ignored while focus sits in a text field so typing a
 * comment never fires a decision.
 */

export type TriageAction =
  | { kind: "move"; delta: number }
  | { kind: "approve" }
  | { kind: "reject" };

export function triageActionFor(key: string, inTextField: boolean): TriageAction | null {
  if (inTextField) {
    return null;
  }
  switch (key) {
    case "j":
      return { kind: "move", delta: 1 };
    case "k":
      return { kind: "move", delta: -1 };
    case "a":
      return { kind: "approve" };
    case "r":
      return { kind: "reject" };
    default:
      return null;
  }
}
