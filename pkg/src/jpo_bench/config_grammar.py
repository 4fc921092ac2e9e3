EXPERIMENT = r"""
start: item*

?item: NAME "=" value -> pair
     | NAME "{" item* "}" -> section

?value: ESCAPED_STRING -> string
      | SIGNED_NUMBER -> number
      | "true" -> true
      | "false" -> false
      | NAME -> word
      | "[" (value ("," value)*)? "]" -> array

NAME: /[A-Za-z_][A-Za-z0-9_\-]*/
COMMENT: /#[^\n]*/

%import common.ESCAPED_STRING
%import common.SIGNED_NUMBER
%import common.WS

%ignore WS
%ignore COMMENT
"""
